//! `odflow`: one command per pipeline stage.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use odflow::diffusion::{generate, TrainConfig, TrainedModel, Trainer, TrainingCity};
use odflow::features::{
    build_corpus_conditions, load_embeddings, toy_extract, write_embeddings, RegionFeature,
};
use odflow::ingest::{
    layout, list_city_dirs, load_city_dir, read_boundaries, read_od, read_populations, write_od,
    CityBundle, OdFormat,
};
use odflow::metrics::{default_smoothing_window, evaluate, rank_curve};
use odflow::nn::checkpoint::Checkpoint;
use odflow::physical::{
    default_outflows, fit_gravity, gravity, radiation, GravityParams, DEFAULT_TRIP_RATE,
};
use odflow::rng::substream;
use odflow::synth::{split_corpus, write_corpus, SynthConfig};
use odflow::tilegrid::{
    load_tiles, read_region_raster, region_raster, region_tiles, write_region_raster, DEFAULT_ZOOM,
};
use odflow::{ODMatrix, PairSelection};
use odflow_fetch::{fetch_tiles, FetchConfig, FetchError, TILE_URL_ENV};

#[derive(Parser)]
#[command(
    name = "odflow",
    version,
    about = "Origin-destination flow generation pipeline"
)]
struct Cli {
    /// More log output (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of cities with ground-truth flows.
    Synth {
        /// TOML generator config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Skip rendering imagery tiles.
        #[arg(long)]
        no_tiles: bool,
    },
    /// Tile cache operations.
    Tiles {
        #[command(subcommand)]
        command: TilesCommand,
    },
    /// Stitch and mask tiles into one raster per region.
    Prepare {
        #[arg(long)]
        boundaries: PathBuf,
        /// Tile directory laid out as {z}/{x}/{y}.png|raw.
        #[arg(long)]
        tiles: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ZOOM)]
        zoom: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce region embeddings.
    Features {
        #[arg(long, value_enum)]
        mode: FeatureMode,
        /// Prepared raster directory (toy) or embedding file (ingest).
        #[arg(long = "in")]
        input: PathBuf,
        /// Population CSV naming the regions to embed.
        #[arg(long)]
        population: PathBuf,
        /// Output embedding file (ODEMB1).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the diffusion generator on a corpus directory.
    Train {
        /// Directory of city directories, each with boundaries, population,
        /// embeddings and reference OD.
        #[arg(long)]
        corpus: PathBuf,
        /// TOML training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write the train/validation/test city assignment here.
        #[arg(long)]
        split_out: Option<PathBuf>,
    },
    /// Sample an OD matrix for one city.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// City directory with boundaries, population and embeddings.
        #[arg(long)]
        city: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Physical baseline flows for one city.
    Baseline {
        #[arg(long, value_enum)]
        model: BaselineModel,
        #[arg(long)]
        city: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fit gravity (G, β) on every city of this corpus that has a
        /// reference OD. Without it and without --beta, the city's own
        /// reference OD is used.
        #[arg(long)]
        fit: Option<PathBuf>,
        /// Fixed gravity exponent instead of fitting.
        #[arg(long)]
        beta: Option<f64>,
        /// Gravity constant used with --beta.
        #[arg(long, default_value_t = 1.0)]
        g: f64,
        /// Radiation outflow per resident.
        #[arg(long, default_value_t = DEFAULT_TRIP_RATE)]
        trip_rate: f64,
        /// Rescale radiation rows to sum exactly to their outflow.
        #[arg(long)]
        renormalize: bool,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Compare a generated OD matrix with a reference.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        /// Leave intra-region flows out of every metric.
        #[arg(long)]
        exclude_diagonal: bool,
        /// Report file (key = value lines).
        #[arg(long)]
        out: PathBuf,
        /// Rank curve CSV; defaults to the report path with extension
        /// `curve.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Moving-average window of the rank curve; default max(3, pairs/200).
        #[arg(long)]
        window: Option<usize>,
    },
}

#[derive(Subcommand)]
enum TilesCommand {
    /// Download the tiles covering every region into the cache.
    Fetch(FetchArgs),
}

#[derive(Args)]
struct FetchArgs {
    #[arg(long)]
    boundaries: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ZOOM)]
    zoom: u8,
    #[arg(long, default_value = "tiles")]
    cache: PathBuf,
    /// URL template with {z}, {x}, {y}; falls back to $ODFLOW_TILE_URL.
    #[arg(long)]
    url: Option<String>,
    /// Use only cached tiles; never touch the network.
    #[arg(long)]
    offline: bool,
    #[arg(long, default_value_t = 4)]
    max_parallel: usize,
    /// Requests per second.
    #[arg(long, default_value_t = 10.0)]
    rate: f64,
    #[arg(long, default_value_t = 3)]
    retries: u32,
}

#[derive(Args)]
struct FormatArg {
    /// OD CSV layout.
    #[arg(long, value_enum, default_value_t = Format::Edges)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Edges,
    Dense,
}

impl From<Format> for OdFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Edges => OdFormat::Edges,
            Format::Dense => OdFormat::Dense,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureMode {
    Toy,
    Ingest,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineModel {
    Gravity,
    Radiation,
}

enum Failure {
    Core(odflow::Error),
    Fetch(FetchError),
}

impl From<odflow::Error> for Failure {
    fn from(e: odflow::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<FetchError> for Failure {
    fn from(e: FetchError) -> Self {
        Failure::Fetch(e)
    }
}

impl Failure {
    fn kind_and_code(&self) -> (&'static str, u8) {
        use odflow::Error as E;
        match self {
            Failure::Core(E::Usage(_)) | Failure::Fetch(FetchError::Config(_)) => ("usage", 2),
            Failure::Core(E::Shape(_)) => ("internal", 3),
            Failure::Core(E::Io { .. }) | Failure::Fetch(FetchError::Io { .. }) => ("io", 1),
            Failure::Core(E::Format { .. }) => ("format", 1),
            Failure::Core(E::Domain(_)) => ("domain", 1),
            Failure::Core(E::NonFinite(_)) => ("non-finite", 1),
            Failure::Core(E::Validation(_)) => ("validation", 1),
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Fetch(e) => e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Core(odflow::Error::Usage(msg.into()))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|info| {
        let msg = info
            .payload()
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| info.payload().downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        let loc = info
            .location()
            .map(|l| format!(" at {}:{}", l.file(), l.line()))
            .unwrap_or_default();
        eprintln!("error[internal]: {}{loc}", one_line(&msg));
        std::process::exit(3);
    }));
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, code) = f.kind_and_code();
            eprintln!("error[{kind}]: {}", one_line(&f.message()));
            ExitCode::from(code)
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Synth {
            config,
            out,
            no_tiles,
        } => synth(config.as_deref(), &out, !no_tiles),
        Command::Tiles {
            command: TilesCommand::Fetch(a),
        } => tiles_fetch(a),
        Command::Prepare {
            boundaries,
            tiles,
            zoom,
            out,
        } => prepare(&boundaries, &tiles, zoom, &out),
        Command::Features {
            mode,
            input,
            population,
            out,
        } => features(mode, &input, &population, &out),
        Command::Train {
            corpus,
            config,
            out,
            resume,
            split_out,
        } => train(
            &corpus,
            config.as_deref(),
            &out,
            resume.as_deref(),
            split_out.as_deref(),
        ),
        Command::Generate {
            ckpt,
            city,
            seed,
            out,
            format,
        } => generate_cmd(&ckpt, &city, seed, &out, format.format),
        Command::Baseline {
            model,
            city,
            out,
            fit,
            beta,
            g,
            trip_rate,
            renormalize,
            format,
        } => {
            let opts = BaselineOpts {
                fit,
                beta,
                g,
                trip_rate,
                renormalize,
            };
            baseline(model, &city, &out, &opts, format.format)
        }
        Command::Eval {
            reference,
            gen,
            exclude_diagonal,
            out,
            curve,
            window,
        } => eval(&reference, &gen, exclude_diagonal, &out, curve, window),
    }
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| {
        odflow::Error::Io {
            path: path.into(),
            source: e,
        }
        .into()
    })
}

fn synth(config: Option<&Path>, out: &Path, tiles: bool) -> Outcome {
    let cfg = match config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    let names = write_corpus(out, &cfg, tiles)?;
    println!("wrote {} cities to {}", names.len(), out.display());
    Ok(())
}

fn tiles_fetch(a: FetchArgs) -> Outcome {
    let url = match a.url.or_else(|| std::env::var(TILE_URL_ENV).ok()) {
        Some(u) => u,
        None if a.offline => String::new(),
        None => {
            return Err(usage(format!(
                "no tile URL: pass --url or set {TILE_URL_ENV}"
            )))
        }
    };
    let (boundaries, _) = read_boundaries(&a.boundaries)?;
    let mut needed = BTreeSet::new();
    for b in &boundaries {
        needed.extend(region_tiles(b, a.zoom)?);
    }
    let cfg = FetchConfig {
        max_parallel: a.max_parallel,
        rate_limit: a.rate,
        retries: a.retries,
        offline: a.offline,
        ..FetchConfig::new(url, a.cache)
    };
    let r = fetch_tiles(&cfg, &needed)?;
    for (t, msg) in &r.failed {
        warn!("tile {}/{}/{} missing: {msg}", t.z, t.x, t.y);
    }
    println!(
        "fetched={} cached={} failed={}",
        r.fetched,
        r.cached,
        r.failed.len()
    );
    Ok(())
}

fn prepare(boundaries: &Path, tiles: &Path, zoom: u8, out: &Path) -> Outcome {
    let (regions, _) = read_boundaries(boundaries)?;
    let mut absent = 0;
    for b in &regions {
        let (loaded, missing) = load_tiles(tiles, &region_tiles(b, zoom)?)?;
        absent += missing.len();
        let (img, mask) = region_raster(b, &loaded, zoom)?;
        write_region_raster(out, &b.region_id, &img, &mask)?;
    }
    if absent > 0 {
        warn!("{absent} tile reads found no cached tile; those areas are zero-filled");
    }
    println!("prepared {} regions in {}", regions.len(), out.display());
    Ok(())
}

fn features(mode: FeatureMode, input: &Path, population: &Path, out: &Path) -> Outcome {
    let pops = read_populations(population)?;
    let mut table = BTreeMap::new();
    match mode {
        FeatureMode::Toy => {
            for id in pops.keys() {
                let (img, mask) = read_region_raster(input, id)?;
                table.insert(id.clone(), toy_extract(&img, &mask)?);
            }
        }
        FeatureMode::Ingest => {
            let mut all = load_embeddings(input)?;
            let missing: Vec<&str> = pops
                .keys()
                .filter(|id| !all.contains_key(*id))
                .map(|s| s.as_str())
                .collect();
            if !missing.is_empty() {
                return Err(odflow::Error::Validation(format!(
                    "regions without an embedding: {}",
                    missing.join(", ")
                ))
                .into());
            }
            for id in pops.keys() {
                table.insert(id.clone(), all.remove(id).expect("checked above"));
            }
        }
    }
    write_embeddings(out, &table)?;
    println!("wrote {} embeddings to {}", table.len(), out.display());
    Ok(())
}

fn load_training_city(
    name: &str,
    b: &CityBundle,
    cond: odflow::features::ConditionSet,
) -> Result<TrainingCity, Failure> {
    let od = b.od.clone().ok_or_else(|| {
        odflow::Error::Validation(format!(
            "city `{name}` has no reference OD ({})",
            layout::OD
        ))
    })?;
    Ok(TrainingCity::new(name, od, cond)?)
}

fn train(
    corpus: &Path,
    config: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    split_out: Option<&Path>,
) -> Outcome {
    let cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let dirs = list_city_dirs(corpus)?;
    let names: Vec<String> = dirs.iter().map(|(n, _)| n.clone()).collect();
    let (train_names, val_names, test_names) = split_corpus(&names, cfg.split, cfg.seed)?;
    let mut bundles = BTreeMap::new();
    for (name, dir) in &dirs {
        if !test_names.contains(name) {
            bundles.insert(name.clone(), load_city_dir(dir)?);
        }
    }
    let feats: Vec<&[RegionFeature]> = train_names
        .iter()
        .map(|n| bundles[n].features.as_slice())
        .collect();
    if let Some((n, _)) = train_names.iter().zip(&feats).find(|(_, f)| f.is_empty()) {
        return Err(odflow::Error::Validation(format!("city `{n}` has no embeddings")).into());
    }
    let (stats, conds) = build_corpus_conditions(&feats)?;
    let mut train_set = Vec::new();
    for (name, cond) in train_names.iter().zip(conds) {
        let b = &bundles[name];
        let cond = cond.with_distances(odflow::physical::distance_matrix(&b.geos))?;
        train_set.push(load_training_city(name, b, cond)?);
    }
    let mut val_set = Vec::new();
    for name in &val_names {
        let b = &bundles[name];
        val_set.push(load_training_city(name, b, b.conditions(&stats)?)?);
    }
    info!(
        "{} training, {} validation, {} test cities",
        train_set.len(),
        val_set.len(),
        test_names.len()
    );
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::from_checkpoint(cfg, &Checkpoint::load(p)?)?;
            if t.trained.stats != stats {
                return Err(odflow::Error::Validation(
                    "resumed checkpoint was trained on different feature statistics".into(),
                )
                .into());
            }
            t
        }
        None => Trainer::new(cfg, &train_set)?,
    };
    trainer.run(&train_set, &val_set)?;
    trainer.to_checkpoint().save(out)?;
    if let Some(p) = split_out {
        let line = |k: &str, v: &[String]| format!("{k} = {}\n", v.join(","));
        let text = line("train", &train_names)
            + &line("validation", &val_names)
            + &line("test", &test_names);
        write_text(p, &text)?;
    }
    println!(
        "trained {} steps, checkpoint {}",
        trainer.step,
        out.display()
    );
    Ok(())
}

fn generate_cmd(ckpt: &Path, city: &Path, seed: u64, out: &Path, format: Format) -> Outcome {
    let model = TrainedModel::load(ckpt)?;
    let b = load_city_dir(city)?;
    let cond = b.conditions(&model.stats)?;
    let m = generate(&model, &cond, &mut substream(seed, "sampling", 0))?;
    write_od(&m, out, format.into())?;
    Ok(())
}

struct BaselineOpts {
    fit: Option<PathBuf>,
    beta: Option<f64>,
    g: f64,
    trip_rate: f64,
    renormalize: bool,
}

fn baseline(
    model: BaselineModel,
    city: &Path,
    out: &Path,
    o: &BaselineOpts,
    format: Format,
) -> Outcome {
    let b = load_city_dir(city)?;
    let m = match model {
        BaselineModel::Gravity => {
            let params = match (o.beta, &o.fit) {
                (Some(_), Some(_)) => return Err(usage("--beta and --fit are exclusive")),
                (Some(beta), None) => GravityParams { g: o.g, beta },
                (None, Some(corpus)) => {
                    let mut data = Vec::new();
                    for (_, dir) in list_city_dirs(corpus)? {
                        let c = load_city_dir(&dir)?;
                        if let Some(od) = c.od {
                            data.push((c.geos, od));
                        }
                    }
                    fit_gravity(&data, PairSelection::All)?
                }
                (None, None) => {
                    let od = b.od.clone().ok_or_else(|| {
                        usage("gravity needs --beta, --fit <corpus>, or a reference OD in the city directory")
                    })?;
                    fit_gravity(&[(b.geos.clone(), od)], PairSelection::All)?
                }
            };
            info!("gravity G = {}, beta = {}", params.g, params.beta);
            gravity(&b.geos, params)?
        }
        BaselineModel::Radiation => {
            if !(o.trip_rate >= 0.0 && o.trip_rate.is_finite()) {
                return Err(usage(format!(
                    "trip rate must be non-negative, got {}",
                    o.trip_rate
                )));
            }
            radiation(
                &b.geos,
                &default_outflows(&b.geos, o.trip_rate),
                o.renormalize,
            )?
        }
    };
    write_od(&m, out, format.into())?;
    Ok(())
}

/// Reads both matrices over the union of their region ids, so regions with
/// no non-zero flows in one file still line up.
fn read_pair(reference: &Path, gen: &Path) -> Result<(ODMatrix, ODMatrix), Failure> {
    let a = read_od(reference, None)?;
    let b = read_od(gen, None)?;
    if a.region_ids() == b.region_ids() {
        return Ok((a, b));
    }
    let ids: Vec<String> = a
        .region_ids()
        .iter()
        .chain(b.region_ids())
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok((widen(&a, &ids)?, widen(&b, &ids)?))
}

fn widen(m: &ODMatrix, ids: &[String]) -> Result<ODMatrix, Failure> {
    let pos: BTreeMap<&String, usize> = ids.iter().enumerate().map(|(k, id)| (id, k)).collect();
    let mut out = ODMatrix::zeros(ids.to_vec());
    let src = m.region_ids();
    for i in 0..m.n() {
        for j in 0..m.n() {
            out.set(pos[&src[i]], pos[&src[j]], m.flow(i, j))?;
        }
    }
    Ok(out)
}

fn eval(
    reference: &Path,
    gen: &Path,
    exclude_diagonal: bool,
    out: &Path,
    curve: Option<PathBuf>,
    window: Option<usize>,
) -> Outcome {
    let (r, g) = read_pair(reference, gen)?;
    let sel = if exclude_diagonal {
        PairSelection::OffDiagonal
    } else {
        PairSelection::All
    };
    let report = evaluate(&r, &g, sel)?;
    let (rp, gp) = (r.pairs(sel), g.pairs(sel));
    let w = window.unwrap_or_else(|| default_smoothing_window(rp.len()).min(rp.len()));
    let (rc, gc) = rank_curve(&rp, &gp, w)?;
    let mut csv = String::from("rank,reference,generated\n");
    for (k, (a, b)) in rc.iter().zip(&gc).enumerate() {
        csv.push_str(&format!("{k},{a},{b}\n"));
    }
    write_text(out, &report.to_kv())?;
    write_text(
        &curve.unwrap_or_else(|| out.with_extension("curve.csv")),
        &csv,
    )?;
    print!("{}", report.to_kv());
    Ok(())
}
