//! Trusted query service over newline-delimited JSON on TCP.
//!
//! One thread per connection, a read-only database, immutable mechanisms
//! and a single append-only ledger behind a mutex. Each connection draws
//! from its own generator, seeded by the server seed with the connection
//! number as the stream, so a fixed request sequence replays exactly.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densities::Interval;
use crate::error::{Error, Result};
use crate::mechanisms::{Mechanism, MechanismConfig, QuerySpec};

const POLL: Duration = Duration::from_millis(20);
const MAX_LINE: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Database {
    pub records: Vec<f64>,
    pub domain: Interval,
    pub source: PathBuf,
}

impl Database {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Parses one value per row; a leading non-numeric row followed by data is
/// taken as a header. Rows and columns in errors are 1-based, indices 0-based.
pub fn parse_database(text: &str, domain: Interval, source: impl Into<PathBuf>) -> Result<Database> {
    let rows: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let mut body = &rows[..];
    if let [(_, first), rest @ ..] = body {
        if first.parse::<f64>().is_err() && !rest.is_empty() && !first.contains(',') {
            body = rest;
        }
    }
    let mut records = Vec::with_capacity(body.len());
    for &(row, line) in body {
        let mut cols = line.split(',');
        let cell = cols.next().unwrap_or("").trim();
        if cols.next().is_some() {
            return Err(Error::Parse {
                row,
                col: 2,
                message: "expected one value per row".into(),
            });
        }
        let v: f64 = cell.parse().map_err(|_| Error::Parse {
            row,
            col: 1,
            message: format!("`{cell}` is not a number"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                row,
                col: 1,
                message: "value is not finite".into(),
            });
        }
        records.push(v);
    }
    if records.is_empty() {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            message: "database has no entries".into(),
        });
    }
    if let Some(i) = records.iter().position(|&v| !domain.contains(v)) {
        return Err(Error::DomainViolation(format!(
            "entry {i} = {} outside [{}, {}]",
            records[i],
            domain.lo(),
            domain.hi()
        )));
    }
    Ok(Database {
        records,
        domain,
        source: source.into(),
    })
}

pub fn load_database(path: &Path, domain: Interval) -> Result<Database> {
    let text = std::fs::read_to_string(path)?;
    parse_database(&text, domain, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseConfig {
    pub path: PathBuf,
    pub domain: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    pub database: DatabaseConfig,
    pub seed: u64,
    pub ledger: PathBuf,
    pub mechanisms: BTreeMap<String, MechanismConfig>,
}

impl ServerConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.database.path.is_relative() {
            cfg.database.path = base.join(&cfg.database.path);
        }
        if cfg.ledger.is_relative() {
            cfg.ledger = base.join(&cfg.ledger);
        }
        Ok(cfg)
    }

    pub fn domain(&self) -> Result<Interval> {
        let [lo, hi] = self.database.domain;
        Interval::new(lo, hi).map_err(|e| Error::Config(format!("database domain: {e}")))
    }

    pub fn load_database(&self) -> Result<Database> {
        load_database(&self.database.path, self.domain()?)
    }

    /// Builds every configured mechanism for a database of `n` entries.
    pub fn registry(&self, n: usize) -> Result<Registry> {
        let domain = self.domain()?;
        self.mechanisms
            .iter()
            .map(|(name, mc)| {
                let m = mc
                    .build(name, n)
                    .map_err(|e| Error::Config(format!("mechanism `{name}`: {e}")))?;
                Ok((name.clone(), m.with_domain(domain)))
            })
            .collect()
    }
}

pub type Registry = BTreeMap<String, Mechanism>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub id: String,
    pub query: QuerySpec,
    pub mechanism: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireResponse {
    Value { id: String, value: Vec<f64>, mechanism: String },
    Error { id: String, error: WireError },
}

impl WireResponse {
    fn error(id: impl Into<String>, e: &Error) -> Self {
        WireResponse::Error {
            id: id.into(),
            error: WireError {
                code: e.code().into(),
                message: e.to_string(),
            },
        }
    }
}

/// One ledger line. Carries the released value and nothing else derived
/// from the database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub request_id: String,
    pub mechanism_id: String,
    pub query: QuerySpec,
    pub value: Vec<f64>,
    pub counter: u64,
}

pub const LEDGER_FIELDS: [&str; 5] = ["request_id", "mechanism_id", "query", "value", "counter"];

/// Append-only NDJSON ledger; counters continue from the last persisted entry.
pub struct Ledger {
    inner: Mutex<(BufWriter<File>, u64)>,
    path: PathBuf,
}

impl Ledger {
    pub fn open(path: &Path) -> Result<Self> {
        let last = match File::open(path) {
            Ok(f) => read_ledger_from(BufReader::new(f))?.last().map_or(0, |e| e.counter),
            Err(e) if e.kind() == ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Mutex::new((BufWriter::new(file), last)),
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_counter(&self) -> u64 {
        self.inner.lock().expect("ledger lock").1
    }

    pub fn append(&self, request_id: &str, mechanism_id: &str, query: &QuerySpec, value: &[f64]) -> Result<u64> {
        let mut guard = self.inner.lock().expect("ledger lock");
        let counter = guard.1 + 1;
        let entry = LedgerEntry {
            request_id: request_id.into(),
            mechanism_id: mechanism_id.into(),
            query: query.clone(),
            value: value.to_vec(),
            counter,
        };
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        guard.0.write_all(line.as_bytes())?;
        guard.0.flush()?;
        guard.1 = counter;
        Ok(counter)
    }

    pub fn flush(&self) -> Result<()> {
        let mut guard = self.inner.lock().expect("ledger lock");
        guard.0.flush()?;
        guard.0.get_ref().sync_all()?;
        Ok(())
    }
}

fn read_ledger_from(reader: impl BufRead) -> Result<Vec<LedgerEntry>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            row: i + 1,
            col: e.column(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerEntry>> {
    read_ledger_from(BufReader::new(File::open(path)?))
}

/// Computes `f(x) + w` for a request without touching the ledger.
pub fn answer(db: &Database, registry: &Registry, request: &Request, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mech = registry
        .get(&request.mechanism)
        .ok_or_else(|| Error::UnknownMechanism(request.mechanism.clone()))?;
    let query = request.query.resolve(db.len())?;
    Ok(mech.respond_to(&query, &db.records, rng)?.value)
}

/// Everything a connection handler needs; shared read-only across threads.
pub struct Service {
    pub db: Database,
    pub registry: Registry,
    pub ledger: Ledger,
}

impl Service {
    pub fn from_config(cfg: &ServerConfig) -> Result<Self> {
        let db = cfg.load_database()?;
        let registry = cfg.registry(db.len())?;
        let ledger = Ledger::open(&cfg.ledger)?;
        Ok(Self { db, registry, ledger })
    }

    /// Answers a request and records the response before it is released.
    pub fn handle_request(&self, request: &Request, rng: &mut ChaCha8Rng) -> WireResponse {
        let result = answer(&self.db, &self.registry, request, rng).and_then(|value| {
            self.ledger
                .append(&request.id, &request.mechanism, &request.query, &value)
                .map(|_| value)
        });
        match result {
            Ok(value) => WireResponse::Value {
                id: request.id.clone(),
                value,
                mechanism: request.mechanism.clone(),
            },
            Err(e) => WireResponse::error(request.id.clone(), &e),
        }
    }

    /// Parses and answers one protocol line; never fails the connection.
    pub fn handle_line(&self, line: &str, rng: &mut ChaCha8Rng) -> WireResponse {
        match serde_json::from_str::<Request>(line) {
            Ok(req) => self.handle_request(&req, rng),
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|s| s.as_str()).map(str::to_owned))
                    .unwrap_or_default();
                WireResponse::Error {
                    id,
                    error: WireError {
                        code: "malformed_request".into(),
                        message: e.to_string(),
                    },
                }
            }
        }
    }
}

/// Generator for the `connection`-th connection under `seed`.
pub fn connection_rng(seed: u64, connection: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(connection);
    rng
}

fn serve_connection(service: &Service, stream: TcpStream, mut rng: ChaCha8Rng, stop: &AtomicBool) -> io::Result<()> {
    stream.set_read_timeout(Some(POLL))?;
    stream.set_nodelay(true)?;
    let mut writer = BufWriter::new(stream.try_clone()?);
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => return Ok(()),
            Ok(_) if buf.ends_with(b"\n") => {
                let reply = match std::str::from_utf8(&buf) {
                    Ok(line) if line.trim().is_empty() => None,
                    Ok(line) => Some(service.handle_line(line.trim(), &mut rng)),
                    Err(e) => Some(WireResponse::Error {
                        id: String::new(),
                        error: WireError {
                            code: "malformed_request".into(),
                            message: e.to_string(),
                        },
                    }),
                };
                buf.clear();
                if let Some(r) = reply {
                    serde_json::to_writer(&mut writer, &r)?;
                    writer.write_all(b"\n")?;
                    writer.flush()?;
                }
            }
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                if stop.load(Ordering::SeqCst) {
                    return Ok(());
                }
            }
            Err(e) => return Err(e),
        }
        if buf.len() > MAX_LINE {
            return Err(io::Error::new(ErrorKind::InvalidData, "request line too long"));
        }
    }
}

/// A bound, not yet running, service.
pub struct Server {
    listener: TcpListener,
    service: Arc<Service>,
    seed: u64,
    stop: Arc<AtomicBool>,
}

impl Server {
    pub fn bind(cfg: &ServerConfig) -> Result<Self> {
        let service = Service::from_config(cfg)?;
        let listener = TcpListener::bind(&cfg.listen).map_err(|source| Error::Bind {
            addr: cfg.listen.clone(),
            source,
        })?;
        listener.set_nonblocking(true)?;
        Ok(Self {
            listener,
            service: Arc::new(service),
            seed: cfg.seed,
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Setting the flag stops the accept loop and every connection.
    pub fn stop_handle(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn service(&self) -> Arc<Service> {
        self.service.clone()
    }

    /// Runs until the stop flag is set, then joins handlers and flushes the ledger.
    pub fn run(self) -> Result<()> {
        let connections = AtomicU64::new(0);
        let mut handlers = Vec::new();
        while !self.stop.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    stream.set_nonblocking(false)?;
                    let k = connections.fetch_add(1, Ordering::SeqCst);
                    let rng = connection_rng(self.seed, k);
                    let service = self.service.clone();
                    let stop = self.stop.clone();
                    log::info!("connection {k} from {peer}");
                    handlers.push(thread::spawn(move || {
                        if let Err(e) = serve_connection(&service, stream, rng, &stop) {
                            log::warn!("connection {k}: {e}");
                        }
                    }));
                    handlers.retain(|h| !h.is_finished());
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => return Err(e.into()),
            }
        }
        for h in handlers {
            let _ = h.join();
        }
        self.service.ledger.flush()
    }
}

/// Binds, installs a Ctrl-C handler and serves until interrupted.
pub fn serve(cfg: &ServerConfig) -> Result<()> {
    let server = Server::bind(cfg)?;
    let stop = server.stop_handle();
    ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst))
        .map_err(|e| Error::Config(format!("signal handler: {e}")))?;
    log::info!("listening on {}", server.local_addr()?);
    server.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub entries: usize,
    pub bounded_checked: usize,
    /// Counters are `first, first + 1, ...` with no gaps.
    pub gap_free: bool,
    pub first_counter: Option<u64>,
    pub last_counter: Option<u64>,
    /// Counters of bounded responses outside `{f(x)} ⊕ W`.
    pub violations: Vec<u64>,
    /// Counters naming mechanisms or queries that no longer resolve.
    pub unresolved: Vec<u64>,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.gap_free && self.violations.is_empty() && self.unresolved.is_empty()
    }
}

/// Re-checks every ledger entry against the database it was drawn from.
pub fn replay_audit(entries: &[LedgerEntry], db: &Database, registry: &Registry) -> ReplayReport {
    let gap_free = entries.windows(2).all(|w| w[1].counter == w[0].counter + 1);
    let mut report = ReplayReport {
        entries: entries.len(),
        bounded_checked: 0,
        gap_free,
        first_counter: entries.first().map(|e| e.counter),
        last_counter: entries.last().map(|e| e.counter),
        violations: Vec::new(),
        unresolved: Vec::new(),
    };
    for e in entries {
        let Some(mech) = registry.get(&e.mechanism_id) else {
            report.unresolved.push(e.counter);
            continue;
        };
        if !mech.noise.is_bounded() {
            continue;
        }
        let verdict = e
            .query
            .resolve(db.len())
            .and_then(|q| mech.response_in_support(&q, &db.records, &e.value));
        match verdict {
            Ok(true) => report.bounded_checked += 1,
            Ok(false) => {
                report.bounded_checked += 1;
                report.violations.push(e.counter);
            }
            Err(_) => report.unresolved.push(e.counter),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::NoiseSpec;
    use crate::mechanisms::Budget;

    fn unit() -> Interval {
        Interval::new(0.0, 1.0).unwrap()
    }

    fn cos_sq_config() -> MechanismConfig {
        MechanismConfig {
            query: QuerySpec::Average { weights: None },
            noise: Some(NoiseSpec::CosSq { lo: 0.0, hi: 1.0 }),
            budget: Budget::Bounded { lo: 0.0, hi: 1.0 },
        }
    }

    fn service(records: &[f64], dir: &Path) -> Service {
        let db = Database {
            records: records.to_vec(),
            domain: unit(),
            source: "mem".into(),
        };
        let mut registry = Registry::new();
        registry.insert("cos".into(), cos_sq_config().build("cos", db.len()).unwrap().with_domain(unit()));
        let ledger = Ledger::open(&dir.join("ledger.ndjson")).unwrap();
        Service { db, registry, ledger }
    }

    #[test]
    fn database_examples() {
        let db = parse_database("0.2\n0.9", unit(), "a.csv").unwrap();
        assert_eq!(db.records, vec![0.2, 0.9]);
        let db = parse_database("value\n0.2\n0.9\n", unit(), "a.csv").unwrap();
        assert_eq!(db.len(), 2);
        match parse_database("1.5", unit(), "a.csv") {
            Err(Error::DomainViolation(m)) => assert!(m.contains("entry 0")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_database("abc", unit(), "a.csv"), Err(Error::Parse { row: 1, col: 1, .. })));
        assert!(matches!(
            parse_database("0.1\nabc\n", unit(), "a.csv"),
            Err(Error::Parse { row: 2, col: 1, .. })
        ));
        assert!(matches!(parse_database("0.1,0.2", unit(), "a.csv"), Err(Error::Parse { col: 2, .. })));
    }

    #[test]
    fn request_examples() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(&[0.2, 0.9], dir.path());
        let mut rng = connection_rng(7, 0);
        for _ in 0..200 {
            match svc.handle_line(r#"{"id":"a","query":{"type":"average"},"mechanism":"cos"}"#, &mut rng) {
                WireResponse::Value { value, .. } => assert!(value[0] >= 0.55 && value[0] <= 1.55),
                e => panic!("{e:?}"),
            }
        }
        match svc.handle_line(r#"{"id":"b","query":{"type":"average"},"mechanism":"nope"}"#, &mut rng) {
            WireResponse::Error { id, error } => {
                assert_eq!(id, "b");
                assert_eq!(error.code, "unknown_mechanism");
            }
            r => panic!("{r:?}"),
        }
        match svc.handle_line(r#"{"id":"c","query":{"type":"identity"},"mechanism":"cos"}"#, &mut rng) {
            WireResponse::Error { error, .. } => assert_eq!(error.code, "incompatible_query"),
            r => panic!("{r:?}"),
        }
        match svc.handle_line("{not json", &mut rng) {
            WireResponse::Error { error, .. } => assert_eq!(error.code, "malformed_request"),
            r => panic!("{r:?}"),
        }
        assert_eq!(svc.ledger.last_counter(), 200);
    }

    #[test]
    fn variance_of_constant_database_is_pure_noise() {
        let dir = tempfile::tempdir().unwrap();
        let db = Database {
            records: vec![0.0; 3],
            domain: unit(),
            source: "mem".into(),
        };
        let cfg = MechanismConfig {
            query: QuerySpec::Variance { n: None },
            noise: None,
            budget: Budget::Bounded { lo: 0.0, hi: 1.0 },
        };
        let mut registry = Registry::new();
        registry.insert("v".into(), cfg.build("v", 3).unwrap());
        let svc = Service {
            db,
            registry,
            ledger: Ledger::open(&dir.path().join("l")).unwrap(),
        };
        let req = Request {
            id: "v".into(),
            query: QuerySpec::Variance { n: None },
            mechanism: "v".into(),
        };
        let mut a = connection_rng(1, 0);
        let mut b = connection_rng(1, 0);
        let y = answer(&svc.db, &svc.registry, &req, &mut a).unwrap();
        let noise = svc.registry["v"].noise.at(&svc.db.records).unwrap();
        assert_eq!(y, noise.sample_one(&mut b));
    }

    #[test]
    fn ledger_resumes_and_has_declared_fields_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.ndjson");
        {
            let l = Ledger::open(&path).unwrap();
            for i in 0..5 {
                assert_eq!(l.append("r", "m", &QuerySpec::Identity { n: None }, &[i as f64]).unwrap(), i + 1);
            }
        }
        let l = Ledger::open(&path).unwrap();
        assert_eq!(l.last_counter(), 5);
        assert_eq!(l.append("r", "m", &QuerySpec::Identity { n: None }, &[0.5]).unwrap(), 6);
        drop(l);
        let text = std::fs::read_to_string(&path).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
            keys.sort();
            let mut want = LEDGER_FIELDS.to_vec();
            want.sort();
            assert_eq!(keys, want);
        }
        assert_eq!(read_ledger(&path).unwrap().len(), 6);
    }

    #[test]
    fn replay_flags_tampered_entries() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(&[0.2, 0.9], dir.path());
        let mut rng = connection_rng(3, 0);
        for i in 0..20 {
            let req = Request {
                id: format!("r{i}"),
                query: QuerySpec::Average { weights: None },
                mechanism: "cos".into(),
            };
            svc.handle_request(&req, &mut rng);
        }
        let mut entries = read_ledger(svc.ledger.path()).unwrap();
        assert!(replay_audit(&entries, &svc.db, &svc.registry).passed());
        entries[4].value[0] = 1.6;
        let r = replay_audit(&entries, &svc.db, &svc.registry);
        assert_eq!(r.violations, vec![5]);
        entries.remove(7);
        assert!(!replay_audit(&entries, &svc.db, &svc.registry).gap_free);
    }

    #[test]
    fn config_round_trip() {
        let text = r#"{"listen":"127.0.0.1:0","database":{"path":"db.csv","domain":[0,1]},"seed":5,
            "ledger":"l.ndjson","mechanisms":{"cos":{"query":{"type":"average"},"noise":{"kind":"cos_sq","lo":0,"hi":1},
            "budget":{"type":"bounded","lo":0,"hi":1}}}}"#;
        let cfg = ServerConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(ServerConfig::parse(&serde_json::to_string(&cfg).unwrap()).unwrap(), cfg);
        assert!(matches!(ServerConfig::parse(r#"{"listen":1}"#), Err(Error::Config(_))));
    }
}
