//! Throwaway PostgreSQL and Redis servers for integration tests.
//!
//! Each test binary starts at most one server of each kind, on a free
//! loopback port, and stops it at process exit. Binaries are located through
//! `SQLQE_PG_BIN` (a directory holding `initdb` and `postgres`) and
//! `SQLQE_REDIS_SERVER`, falling back to `PATH`. When a binary is missing the
//! accessor returns `None` after printing a `SKIPPED` line.
//!
//! PostgreSQL refuses to run as root; under root the server runs as the
//! `nobody` uid/gid (65534).

use std::net::{TcpListener, TcpStream};
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use crate::db::ConnectionParams;
use crate::session::KvParams;

const SUPERUSER: &str = "postgres";
const PASSWORD: &str = "sqlqe-test-password";
const NOBODY: u32 = 65534;
const STARTUP_TIMEOUT: Duration = Duration::from_secs(60);

struct Managed {
    child: Child,
    dir: Option<PathBuf>,
}

static CHILDREN: Mutex<Vec<Managed>> = Mutex::new(Vec::new());
static ATEXIT: OnceLock<()> = OnceLock::new();

extern "C" fn stop_all() {
    let Ok(mut children) = CHILDREN.lock() else { return };
    for m in children.iter_mut() {
        // SIGINT is PostgreSQL's fast shutdown; redis exits on it as well.
        unsafe {
            libc::kill(m.child.id() as libc::pid_t, libc::SIGINT);
        }
    }
    let deadline = Instant::now() + Duration::from_secs(10);
    for m in children.iter_mut() {
        while Instant::now() < deadline {
            if let Ok(Some(_)) = m.child.try_wait() {
                break;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        let _ = m.child.kill();
        let _ = m.child.wait();
        if let Some(dir) = &m.dir {
            let _ = std::fs::remove_dir_all(dir);
        }
    }
    children.clear();
}

fn manage(child: Child, dir: Option<PathBuf>) {
    ATEXIT.get_or_init(|| unsafe {
        libc::atexit(stop_all);
    });
    CHILDREN.lock().unwrap().push(Managed { child, dir });
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").and_then(|l| l.local_addr()).map(|a| a.port()).expect("free port")
}

fn find_binary(env_dir: Option<PathBuf>, name: &str) -> Option<PathBuf> {
    if let Some(dir) = env_dir {
        let p = dir.join(name);
        return p.is_file().then_some(p);
    }
    std::env::split_paths(&std::env::var_os("PATH")?).map(|d| d.join(name)).find(|p| p.is_file())
}

fn is_root() -> bool {
    unsafe { libc::geteuid() == 0 }
}

fn chown_nobody(path: &Path) -> std::io::Result<()> {
    std::os::unix::fs::chown(path, Some(NOBODY), Some(NOBODY))
}

fn wait_for_port(port: u16, child: &mut Child, what: &str) -> Result<(), String> {
    let deadline = Instant::now() + STARTUP_TIMEOUT;
    while Instant::now() < deadline {
        if TcpStream::connect(("127.0.0.1", port)).is_ok() {
            return Ok(());
        }
        if let Ok(Some(status)) = child.try_wait() {
            return Err(format!("{what} exited during startup: {status}"));
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    Err(format!("{what} did not accept connections within {STARTUP_TIMEOUT:?}"))
}

fn skipped(what: &str, why: &str) {
    eprintln!("SKIPPED: {what} unavailable ({why})");
}

/// A running PostgreSQL server with a password-authenticated superuser.
pub struct PgServer {
    pub port: u16,
    counter: AtomicUsize,
}

static PG: OnceLock<Option<PgServer>> = OnceLock::new();

/// The shared PostgreSQL server for this process, started on first call.
pub fn postgres() -> Option<&'static PgServer> {
    PG.get_or_init(|| match start_postgres() {
        Ok(pg) => Some(pg),
        Err(why) => {
            skipped("PostgreSQL", &why);
            None
        }
    })
    .as_ref()
}

fn start_postgres() -> Result<PgServer, String> {
    let bin_dir = std::env::var_os("SQLQE_PG_BIN").map(PathBuf::from);
    let initdb = find_binary(bin_dir.clone(), "initdb").ok_or("initdb not found")?;
    let server = find_binary(bin_dir, "postgres").ok_or("postgres not found")?;
    let dir = std::env::temp_dir().join(format!("sqlqe-pg-{}-{}", std::process::id(), free_port()));
    let data = dir.join("data");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    std::fs::set_permissions(&dir, std::fs::Permissions::from_mode(0o755)).map_err(|e| e.to_string())?;
    let pwfile = dir.join("pw");
    std::fs::write(&pwfile, PASSWORD).map_err(|e| e.to_string())?;
    let as_nobody = is_root();
    if as_nobody {
        chown_nobody(&dir).and_then(|_| chown_nobody(&pwfile)).map_err(|e| e.to_string())?;
    }
    let with_user = |cmd: &mut Command| {
        if as_nobody {
            cmd.uid(NOBODY).gid(NOBODY);
        }
    };

    let mut cmd = Command::new(&initdb);
    cmd.arg("-D").arg(&data).args(["-U", SUPERUSER, "-A", "scram-sha-256", "-E", "UTF8", "--locale=C", "--no-sync"]);
    cmd.arg(format!("--pwfile={}", pwfile.display()));
    with_user(&mut cmd);
    let out = cmd.stdin(Stdio::null()).output().map_err(|e| format!("initdb: {e}"))?;
    if !out.status.success() {
        let _ = std::fs::remove_dir_all(&dir);
        return Err(format!("initdb failed: {}", String::from_utf8_lossy(&out.stderr)));
    }

    let port = free_port();
    let mut cmd = Command::new(&server);
    cmd.arg("-D").arg(&data).arg("-p").arg(port.to_string()).arg("-k").arg(&dir);
    cmd.args(["-c", "listen_addresses=127.0.0.1", "-c", "fsync=off", "-c", "max_connections=200"]);
    cmd.args(["-c", "full_page_writes=off", "-c", "synchronous_commit=off"]);
    with_user(&mut cmd);
    let log = std::fs::File::create(dir.join("server.log")).map_err(|e| e.to_string())?;
    let mut child = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(log)
        .process_group(0)
        .spawn()
        .map_err(|e| format!("postgres: {e}"))?;
    let ready = wait_for_port(port, &mut child, "postgres");
    manage(child, Some(dir.clone()));
    ready.map_err(|e| format!("{e}; log: {}", std::fs::read_to_string(dir.join("server.log")).unwrap_or_default()))?;

    let pg = PgServer { port, counter: AtomicUsize::new(0) };
    // The socket may accept before the server finishes recovery.
    let deadline = Instant::now() + STARTUP_TIMEOUT;
    loop {
        match pg.admin("postgres") {
            Ok(_) => return Ok(pg),
            Err(e) if Instant::now() > deadline => return Err(e.to_string()),
            Err(_) => std::thread::sleep(Duration::from_millis(100)),
        }
    }
}

impl PgServer {
    pub fn params(&self, dbname: &str) -> ConnectionParams {
        ConnectionParams {
            host: "127.0.0.1".into(),
            port: self.port,
            dbname: dbname.into(),
            user: SUPERUSER.into(),
            password: PASSWORD.into(),
        }
    }

    /// A read-write superuser connection, for loading fixtures.
    pub fn admin(&self, dbname: &str) -> Result<postgres::Client, postgres::Error> {
        postgres::Config::new()
            .host("127.0.0.1")
            .port(self.port)
            .user(SUPERUSER)
            .password(PASSWORD)
            .dbname(dbname)
            .connect(postgres::NoTls)
    }

    /// Creates a fresh database named after `prefix`, runs `setup_sql` in it
    /// and returns parameters for connecting to it.
    pub fn create_database(&self, prefix: &str, setup_sql: &str) -> ConnectionParams {
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        let clean: String =
            prefix.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
        let name = format!("{clean}_{}_{n}", std::process::id());
        let mut admin = self.admin("postgres").expect("admin connection");
        admin.batch_execute(&format!("CREATE DATABASE \"{name}\"")).expect("create database");
        if !setup_sql.trim().is_empty() {
            let mut c = self.admin(&name).expect("connect to new database");
            c.batch_execute(setup_sql).expect("fixture SQL");
        }
        self.params(&name)
    }
}

/// A running Redis server without persistence.
pub struct RedisServer {
    pub port: u16,
}

impl RedisServer {
    pub fn params(&self) -> KvParams {
        KvParams::new("127.0.0.1", self.port)
    }
}

static REDIS: OnceLock<Option<RedisServer>> = OnceLock::new();

pub fn redis() -> Option<&'static RedisServer> {
    REDIS
        .get_or_init(|| match start_redis() {
            Ok(r) => Some(r),
            Err(why) => {
                skipped("Redis", &why);
                None
            }
        })
        .as_ref()
}

fn start_redis() -> Result<RedisServer, String> {
    let bin = match std::env::var_os("SQLQE_REDIS_SERVER") {
        Some(p) => Some(PathBuf::from(p)).filter(|p| p.is_file()),
        None => find_binary(None, "redis-server"),
    }
    .ok_or("redis-server not found")?;
    let port = free_port();
    let mut child = Command::new(bin)
        .args(["--port", &port.to_string(), "--bind", "127.0.0.1", "--save", "", "--appendonly", "no"])
        .args(["--daemonize", "no", "--protected-mode", "no"])
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .process_group(0)
        .spawn()
        .map_err(|e| format!("redis-server: {e}"))?;
    let ready = wait_for_port(port, &mut child, "redis-server");
    manage(child, None);
    ready?;
    Ok(RedisServer { port })
}

/// Path of a file under the core crate's `fixtures/` directory.
pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// An engine wired to in-process scripted backends, with handles for call
/// counting.
pub struct ScriptedStack {
    pub engine: crate::engine::Engine,
    pub llm: std::sync::Arc<crate::llm::ScriptedLlm>,
    pub db: crate::db::ScriptedDatabase,
    pub db_counts: std::sync::Arc<crate::db::DbCallCounts>,
    pub bus: std::sync::Arc<crate::events::MemoryBus>,
    pub kv: std::sync::Arc<crate::session::MemoryHashStore>,
}

impl ScriptedStack {
    pub fn new(db: crate::db::ScriptedDatabase, llm: crate::llm::ScriptedLlm) -> Self {
        Self::with_settings(db, llm, crate::engine::EngineSettings::default())
    }

    pub fn with_settings(
        db: crate::db::ScriptedDatabase,
        llm: crate::llm::ScriptedLlm,
        settings: crate::engine::EngineSettings,
    ) -> Self {
        use std::sync::Arc;
        let llm = Arc::new(llm);
        let connector = crate::db::CountingConnector::new(db.clone());
        let db_counts = connector.counts();
        let bus = Arc::new(crate::events::MemoryBus::new());
        let (store, kv) = crate::session::SessionStore::in_memory();
        let backends =
            crate::engine::Backends { llm: llm.clone(), connector: Arc::new(connector), store, bus: bus.clone() };
        let engine = crate::engine::Engine::with_backends(backends, settings);
        Self { engine, llm, db, db_counts, bus, kv }
    }

    /// Progress events published on `chat_id`'s channel, decoded.
    pub fn events(&self, chat_id: &str) -> Vec<crate::events::ProgressEvent> {
        self.bus.published_on(chat_id).iter().filter_map(|r| crate::events::parse_frame(&r.payload).ok()).collect()
    }
}
