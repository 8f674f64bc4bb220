//! Tile download client: fills a `{z}/{x}/{y}.png|raw` cache from a URL
//! template, with bounded parallelism, a shared rate limit, retries with
//! jittered exponential backoff, and an offline mode.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::{debug, warn};
use odflow::tilegrid::{decode_raw, find_tile, tile_path, TileCoord, TILE_RAW_MAGIC};
use rand::Rng;

/// Environment variable that may supply the URL template.
pub const TILE_URL_ENV: &str = "ODFLOW_TILE_URL";

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("invalid fetch config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct FetchConfig {
    /// `http(s)://` or `file://` URL with `{z}`, `{x}` and `{y}` placeholders.
    pub url_template: String,
    pub cache_dir: PathBuf,
    pub max_parallel: usize,
    /// Requests per second, shared by all workers.
    pub rate_limit: f64,
    pub retries: u32,
    pub offline: bool,
    /// Delay before the first retry; doubles per attempt, jittered ×[0.5, 1.5).
    pub backoff: Duration,
    pub timeout: Duration,
}

impl FetchConfig {
    pub fn new(url_template: impl Into<String>, cache_dir: impl Into<PathBuf>) -> Self {
        FetchConfig {
            url_template: url_template.into(),
            cache_dir: cache_dir.into(),
            max_parallel: 4,
            rate_limit: 10.0,
            retries: 3,
            offline: false,
            backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(30),
        }
    }

    pub fn validate(&self) -> Result<(), FetchError> {
        let bad = |m: String| Err(FetchError::Config(m));
        if !self.offline {
            for p in ["{z}", "{x}", "{y}"] {
                if !self.url_template.contains(p) {
                    return bad(format!("url template `{}` lacks {p}", self.url_template));
                }
            }
        }
        if self.max_parallel == 0 {
            return bad("max_parallel must be at least 1".into());
        }
        if !(self.rate_limit > 0.0 && self.rate_limit.is_finite()) {
            return bad(format!(
                "rate_limit must be positive, got {}",
                self.rate_limit
            ));
        }
        Ok(())
    }

    pub fn url(&self, t: TileCoord) -> String {
        self.url_template
            .replace("{z}", &t.z.to_string())
            .replace("{x}", &t.x.to_string())
            .replace("{y}", &t.y.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FetchReport {
    pub fetched: usize,
    pub cached: usize,
    /// Tiles absent from the cache afterwards, with the last error.
    pub failed: Vec<(TileCoord, String)>,
}

/// Spaces request starts at least `1 / rate` apart across all threads.
struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn new(rate: f64) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(1.0 / rate),
            next: Mutex::new(Instant::now()),
        }
    }

    fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

enum Attempt {
    Done(Vec<u8>),
    /// Worth another try (transport error, 5xx, 429).
    Retry(String),
    Fatal(String),
}

fn classify_status(status: u16, url: &str) -> Attempt {
    let msg = format!("HTTP {status} for {url}");
    if status == 429 || status >= 500 {
        Attempt::Retry(msg)
    } else {
        Attempt::Fatal(msg)
    }
}

fn get(agent: &ureq::Agent, url: &str) -> Attempt {
    if let Some(path) = url.strip_prefix("file://") {
        return match fs::read(path) {
            Ok(b) => Attempt::Done(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Attempt::Fatal(format!("{path}: not found"))
            }
            Err(e) => Attempt::Retry(format!("{path}: {e}")),
        };
    }
    match agent.get(url).call() {
        Ok(mut resp) => {
            let status = resp.status().as_u16();
            if !(200..300).contains(&status) {
                return classify_status(status, url);
            }
            match resp.body_mut().read_to_vec() {
                Ok(b) => Attempt::Done(b),
                Err(e) => Attempt::Retry(format!("{url}: {e}")),
            }
        }
        Err(e) => Attempt::Retry(format!("{url}: {e}")),
    }
}

/// Cache extension and bytes for a downloaded tile. PNG and ODTILE1 are kept
/// verbatim; other decodable images (JPEG) are re-encoded as PNG.
fn normalize(bytes: Vec<u8>, url: &str) -> Result<(&'static str, Vec<u8>), String> {
    if bytes.starts_with(TILE_RAW_MAGIC) {
        decode_raw(&bytes, Path::new(url)).map_err(|e| e.to_string())?;
        return Ok(("raw", bytes));
    }
    let img =
        image::load_from_memory(&bytes).map_err(|e| format!("{url}: undecodable tile: {e}"))?;
    if bytes.starts_with(PNG_MAGIC) {
        return Ok(("png", bytes));
    }
    let mut out = std::io::Cursor::new(Vec::new());
    img.into_rgb8()
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| format!("{url}: {e}"))?;
    Ok(("png", out.into_inner()))
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes next to the destination, then renames over it.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().expect("tile path has a parent");
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("tile");
    let tmp = dir.join(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn fetch_one(
    cfg: &FetchConfig,
    agent: &ureq::Agent,
    limiter: &RateLimiter,
    t: TileCoord,
) -> Result<(), String> {
    let url = cfg.url(t);
    let local = url.starts_with("file://");
    let mut last = String::new();
    for attempt in 0..=cfg.retries {
        if attempt > 0 {
            let base = cfg.backoff.as_secs_f64() * 2f64.powi(attempt as i32 - 1);
            let jitter = rand::rng().random_range(0.5..1.5);
            std::thread::sleep(Duration::from_secs_f64(base * jitter));
        }
        if !local {
            limiter.acquire();
        }
        match get(agent, &url) {
            Attempt::Done(bytes) => {
                let (ext, bytes) = normalize(bytes, &url)?;
                let path = tile_path(&cfg.cache_dir, t, ext);
                return write_atomic(&path, &bytes).map_err(|e| format!("{}: {e}", path.display()));
            }
            Attempt::Fatal(msg) => return Err(msg),
            Attempt::Retry(msg) => {
                debug!("attempt {} for {url} failed: {msg}", attempt + 1);
                last = msg;
            }
        }
    }
    Err(last)
}

/// Ensures every tile is cached, downloading the missing ones. Blocks until
/// all tiles resolve; per-tile failures are reported, not returned as errors.
pub fn fetch_tiles(
    cfg: &FetchConfig,
    tiles: &BTreeSet<TileCoord>,
) -> Result<FetchReport, FetchError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.cache_dir).map_err(|e| FetchError::Io {
        path: cfg.cache_dir.clone(),
        source: e,
    })?;
    let mut report = FetchReport::default();
    let mut queue = VecDeque::new();
    for &t in tiles {
        if find_tile(&cfg.cache_dir, t).is_some() {
            report.cached += 1;
        } else if cfg.offline {
            report.failed.push((t, "not cached (offline)".into()));
        } else {
            queue.push_back(t);
        }
    }
    if queue.is_empty() {
        return Ok(report);
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(cfg.timeout))
        .user_agent(concat!("odflow/", env!("CARGO_PKG_VERSION")))
        .build()
        .into();
    let limiter = RateLimiter::new(cfg.rate_limit);
    let workers = cfg.max_parallel.min(queue.len());
    let queue = Mutex::new(queue);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let Some(t) = queue.lock().expect("queue poisoned").pop_front() else {
                    break;
                };
                let r = fetch_one(cfg, &agent, &limiter, t);
                if let Err(msg) = &r {
                    warn!("tile {}/{}/{} failed: {msg}", t.z, t.x, t.y);
                }
                results.lock().expect("results poisoned").push((t, r));
            });
        }
    });
    for (t, r) in results.into_inner().expect("results poisoned") {
        match r {
            Ok(()) => report.fetched += 1,
            Err(msg) => report.failed.push((t, msg)),
        }
    }
    report.failed.sort_by_key(|(t, _)| *t);
    Ok(report)
}
