use std::io::Write;
use std::process::{Command, Output, Stdio};

use casbatch_cli::{app_state, RunningServer};
use casbatch_core::config::ServerConfig;
use casbatch_core::deploy;

const BIN: &str = env!("CARGO_BIN_EXE_casbatch");

fn casbatch(url: &str, ws: i64, pw: &str, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("CASBATCH_URL", url)
        .env("CASBATCH_WSID", ws.to_string())
        .env("CASBATCH_PASSWORD", pw)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn client_commands_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, ws) = deploy::quickstart(dir.path(), 500, 3, "pw").unwrap();
    let cfg = ServerConfig::for_data_dir(dir.path());
    let server = RunningServer::start(app_state(&cfg, None), "127.0.0.1:0").unwrap();
    let url = server.url();

    let out = casbatch(&url, ws.0, "pw", &["quick", "-q", "SELECT 1"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout), "col1\n1\n");

    let out = casbatch(&url, ws.0, "pw", &["quick", "-q", "SELECT COUNT(*) AS n FROM galaxy"]);
    assert_eq!(text(&out.stdout), "n\n500\n");

    let out = casbatch(&url, ws.0, "pw", &["submit", "-q", "SELECT obj_id INTO MyDB.ids FROM galaxy"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let id = text(&out.stdout).trim().to_string();
    assert!(id.parse::<i64>().is_ok());

    let out = casbatch(&url, ws.0, "pw", &["--json", "status", &id]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["state"], "Ready");

    let out = casbatch(&url, ws.0, "pw", &["status", "987654"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("404"), "{}", text(&out.stderr));

    let out = casbatch(&url, ws.0, "wrong", &["tables"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("401"));

    // usage errors
    let out = casbatch(&url, ws.0, "pw", &["status"]);
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(BIN).args(["tables"]).env_remove("CASBATCH_WSID").env("CASBATCH_URL", &url).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn admin_commands() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().to_str().unwrap();
    let run = |args: &[&str], stdin: Option<&str>| {
        let mut child = Command::new(BIN)
            .args(args)
            .env_remove("CASBATCH_PASSWORD")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        if let Some(s) = stdin {
            child.stdin.take().unwrap().write_all(s.as_bytes()).unwrap();
        }
        child.wait_with_output().unwrap()
    };
    assert!(run(&["admin", "init", "--data", data], None).status.success());
    let out = run(&["admin", "add-target", "--data", data, "--name", "east", "--context", "DR1", "--hosts-mydb"], None);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let out = run(&["admin", "add-user", "--data", data], Some("hunter2\n"));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let ws: i64 = text(&out.stdout).trim().parse().unwrap();
    assert!(run(&["admin", "add-group", "--data", data, "--id", "team", "--owner", &ws.to_string()], None).status.success());
    let out = run(&["admin", "targets", "--data", data], None);
    let listing = text(&out.stdout);
    assert!(listing.starts_with("target_id\tname"));
    assert!(listing.contains("east") && listing.contains("DR1"));

    let admin = casbatch_core::admin::AdminDb::open(&deploy::admin_path(dir.path())).unwrap();
    assert!(casbatch_core::auth::verify_password("hunter2", &admin.user(casbatch_core::model::WsId(ws)).unwrap().password_hash));
}

#[test]
fn stats_and_datagen_binaries() {
    let out = Command::new(env!("CARGO_BIN_EXE_casbatch-stats")).args(["--synthetic", "20000"]).output().unwrap();
    assert!(out.status.success());
    let s = text(&out.stdout);
    let slope: f64 = s.lines().find_map(|l| l.strip_prefix("# slope ")).unwrap().parse().unwrap();
    assert!((slope + 1.0).abs() < 0.1, "slope {slope}");

    let dir = tempfile::tempdir().unwrap();
    let mut admin = deploy::init(dir.path()).unwrap();
    deploy::add_target(&mut admin, dir.path(), "t1", &[], 2, true).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_casbatch-datagen"))
        .args(["--rows", "300", "--seed", "4", "--target", "t1", "--data", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out.stderr));
    let checksum = text(&out.stdout).trim().rsplit('\t').next().unwrap().to_string();
    assert_eq!(checksum, casbatch_core::datagen::checksum(casbatch_core::datagen::CatalogSpec { n_rows: 300, seed: 4 }));
}

#[cfg(unix)]
#[test]
fn serve_stops_cleanly_on_sigterm() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, ws) = deploy::quickstart(dir.path(), 100, 1, "pw").unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(BIN)
        .args(["serve", "--data", dir.path().to_str().unwrap(), "--listen", &addr])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let url = format!("http://{addr}");
    let mut up = false;
    for _ in 0..100 {
        let out = casbatch(&url, ws.0, "pw", &["quick", "-q", "SELECT 2 AS two"]);
        if out.status.success() {
            assert_eq!(text(&out.stdout), "two\n2\n");
            up = true;
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(100));
    }
    assert!(up, "server never came up");
    let killed = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    assert_eq!(child.wait().unwrap().code(), Some(0));
}
