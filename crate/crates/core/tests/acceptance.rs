//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p odflow-core --test acceptance`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use odflow::diffusion::{
    forward_sample, generate, generate_with_noise, make_schedule, predict_noise, Denoiser,
    DenoiserConfig, FlowCodec, LrSchedule, PermutedNoise, ReverseVariance, RngNoise, ScheduleKind,
    TrainConfig, TrainedModel, Trainer, TrainingCity,
};
use odflow::features::{
    build_conditions, build_corpus_conditions, toy_extract, ConditionSet, RegionFeature,
};
use odflow::ingest::{layout, load_city_dir, read_od, write_od, CityBundle, OdFormat};
use odflow::metrics::{cpc, evaluate, nrmse, rmse, spearman};
use odflow::nn::checkpoint::Checkpoint;
use odflow::nn::{Graph, LayerNorm, Linear, Mlp, ParamStore, Tensor, Var};
use odflow::physical::{
    default_outflows, fit_gravity, gravity, intervening_population, radiation, DEFAULT_TRIP_RATE,
};
use odflow::rng::substream;
use odflow::synth::{split_corpus, write_corpus, SynthCity, SynthConfig, SynthModel};
use odflow::tilegrid::{
    load_tiles, lonlat_to_pixel, lonlat_to_tile, pixel_to_lonlat, rasterize_mask, region_raster,
    region_tiles, GeoPoint, RegionBoundary, TileRect, TILE_SIZE,
};
use odflow::{ODMatrix, PairSelection};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- 1, 2: metrics ----

fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let below = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut tested = 0;
    while tested < 100 {
        let r: Vec<f64> = (0..100)
            .map(|_| rng.random_range(0..50u32) as f64)
            .collect();
        let g: Vec<f64> = (0..100)
            .map(|_| rng.random_range(0..50u32) as f64)
            .collect();
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let sd = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mse = r.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let mins: f64 = r.iter().zip(&g).map(|(a, b)| a.min(*b)).sum();
        let want = [
            mse.sqrt(),
            mse.sqrt() / sd,
            2.0 * mins / (r.iter().sum::<f64>() + g.iter().sum::<f64>()),
            brute_pearson(&brute_ranks(&r), &brute_ranks(&g)),
        ];
        let got = [
            rmse(&r, &g).map_err(e2s)?,
            nrmse(&r, &g).map_err(e2s)?,
            cpc(&r, &g).map_err(e2s)?,
            spearman(&r, &g).map_err(e2s)?,
        ];
        for (w, x) in want.iter().zip(&got) {
            worst = worst.max(rel(*w, *x));
        }
        tested += 1;
    }
    ensure(worst < 1e-9, || format!("max relative error {worst:e}"))?;
    Ok(format!("100 matrices, max relative error {worst:e}"))
}

fn metric_hand_values() -> Outcome {
    let c = cpc(&[0.0, 4.0, 2.0, 0.0], &[0.0, 2.0, 4.0, 0.0]).map_err(e2s)?;
    ensure(c == 2.0 / 3.0, || format!("CPC {c:?}, want 2/3"))?;
    let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).map_err(e2s)?;
    ensure(s == 0.8, || format!("Spearman {s:?}, want 0.8"))?;
    Ok(format!("CPC = {c}, Spearman = {s}"))
}

// ---- 3: autodiff ----

fn own_store(s: &mut ParamStore) -> &mut ParamStore {
    s
}

fn model_store(m: &mut Denoiser) -> &mut ParamStore {
    &mut m.store
}

/// Central differences against backward for every parameter scalar.
fn grad_check<M>(
    m: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    build: impl Fn(&mut Graph, &M) -> Result<Var, String>,
) -> Result<(f64, usize), String> {
    const H: f64 = 1e-5;
    store(m).zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, m)?;
    g.backward(loss, store(m)).map_err(e2s)?;
    let ids: Vec<_> = store(m).ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store(m).grad(id).data().to_vec())
        .collect();
    let eval = |m: &M| -> Result<f64, String> {
        let mut g = Graph::new();
        let l = build(&mut g, m)?;
        Ok(g.value(l).item())
    };
    let mut worst = 0.0f64;
    let mut count = 0;
    for (slot, &id) in ids.iter().enumerate() {
        for k in 0..store(m).value(id).len() {
            let orig = store(m).value(id).data()[k];
            store(m).value_mut(id).data_mut()[k] = orig + H;
            let up = eval(m)?;
            store(m).value_mut(id).data_mut()[k] = orig - H;
            let down = eval(m)?;
            store(m).value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[slot][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if err >= 1e-6 {
                return Err(format!(
                    "{}[{k}]: analytic {a} numeric {numeric}",
                    store(m).name(id)
                ));
            }
            worst = worst.max(err);
            count += 1;
        }
    }
    Ok((worst, count))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn autodiff() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut scalars = 0;

    // layers and elementwise ops
    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 5, 6, true, &mut rng);
    let ln = LayerNorm::new(&mut s, "ln", 6);
    let mlp = Mlp::new(&mut s, "mlp", 6, 8, 3, &mut rng);
    perturb(&mut s, &mut rng);
    let x = random_tensor(&mut rng, &[4, 5]);
    let target = random_tensor(&mut rng, &[4, 3]);
    let (w, n) = grad_check(&mut s, own_store, |g, s| {
        let xi = g.constant(x.clone());
        let h = lin.forward(g, s, xi).map_err(e2s)?;
        let h = ln.forward(g, s, h).map_err(e2s)?;
        let h = g.tanh(h);
        let h = mlp.forward(g, s, h).map_err(e2s)?;
        let r = g.relu(h);
        let h = g.add(h, r).map_err(e2s)?;
        let h = g.add_scalar(h, 0.3);
        let t = g.constant(target.clone());
        g.mse(h, t).map_err(e2s)
    })?;
    worst = worst.max(w);
    scalars += n;

    // attention-style composite with pair broadcasting
    let mut s = ParamStore::new();
    let q = Linear::new(&mut s, "q", 4, 4, true, &mut rng);
    let k = Linear::new(&mut s, "k", 4, 4, false, &mut rng);
    let e = Linear::new(&mut s, "e", 4, 2, true, &mut rng);
    let x = random_tensor(&mut rng, &[3, 4]);
    let (w, n) = grad_check(&mut s, own_store, |g, s| {
        let xi = g.constant(x.clone());
        let qv = q.forward(g, s, xi).map_err(e2s)?;
        let kv = k.forward(g, s, xi).map_err(e2s)?;
        let kt = g.transpose(kv).map_err(e2s)?;
        let logits = g.matmul(qv, kt).map_err(e2s)?;
        let logits = g.scale(logits, 0.5);
        let a = g.softmax(logits, 1).map_err(e2s)?;
        let b = g.softmax(logits, 0).map_err(e2s)?;
        let ab = g.mul(a, b).map_err(e2s)?;
        let o = g.matmul_sorted(ab, qv).map_err(e2s)?;
        let po = g.pair_origin(o).map_err(e2s)?;
        let pd = g.pair_dest(kv).map_err(e2s)?;
        let pe = g.sub(po, pd).map_err(e2s)?;
        let pe = g.gelu(pe);
        let ev = e.forward(g, s, pe).map_err(e2s)?;
        let sl = g.slice(ev, 1, 0, 1).map_err(e2s)?;
        let sl = g.reshape(sl, &[3, 3]).map_err(e2s)?;
        let cat = g.concat(&[sl, a], 1).map_err(e2s)?;
        let sq = g.mul(cat, cat).map_err(e2s)?;
        let m = g.mean(sq);
        let tot = g.sum(ev);
        let tot = g.scale(tot, 0.01);
        g.add(m, tot).map_err(e2s)
    })?;
    worst = worst.max(w);
    scalars += n;

    // full denoiser training loss
    let cond = random_conditions(&mut rng, 3, 2);
    let cfg = DenoiserConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        edge_dim: 4,
        time_dim: 4,
        ..DenoiserConfig::new(3)
    };
    let mut model = Denoiser::new(cfg, &mut rng).map_err(e2s)?;
    perturb(&mut model.store, &mut rng);
    let sch = make_schedule(20, ScheduleKind::Linear, 1e-3, 0.2).map_err(e2s)?;
    let z0: Vec<f64> = (0..9).map(|_| rng.sample(StandardNormal)).collect();
    let (zt, eps) = forward_sample(&z0, 7, &sch, &mut rng).map_err(e2s)?;
    let (w, n) = grad_check(&mut model, model_store, |g, m| {
        let out = m.forward(g, &zt, 7, &cond).map_err(e2s)?;
        let t = g.constant(Tensor::new(vec![3, 3], eps.clone()).map_err(e2s)?);
        g.mse(out, t).map_err(e2s)
    })?;
    worst = worst.max(w);
    scalars += n;
    Ok(format!(
        "{scalars} parameters checked, max relative error {worst:e}"
    ))
}

// ---- 4, 5: diffusion laws ----

fn forward_law() -> Outcome {
    let sch = make_schedule(200, ScheduleKind::Linear, 5e-4, 0.1).map_err(e2s)?;
    let z0 = [1.5, -0.7, 0.0, 2.2, -1.9, 0.4];
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for t in [1, 100, 200] {
        let ab = sch.alpha_bar(t);
        let mut sum = [0.0; 6];
        let mut sq = [0.0; 6];
        for _ in 0..draws {
            let (zt, _) = forward_sample(&z0, t, &sch, &mut rng).map_err(e2s)?;
            for k in 0..6 {
                sum[k] += zt[k];
                sq[k] += zt[k] * zt[k];
            }
        }
        let var_want = 1.0 - ab;
        for k in 0..6 {
            let mean = sum[k] / draws as f64;
            let var = sq[k] / draws as f64 - mean * mean;
            let z = (mean - ab.sqrt() * z0[k]).abs() / (var_want.sqrt() / (draws as f64).sqrt());
            let dv = (var / var_want - 1.0).abs();
            ensure(z <= 3.0, || {
                format!("t={t} entry {k}: mean off by {z:.2} standard errors")
            })?;
            ensure(dv <= 0.05, || {
                format!("t={t} entry {k}: variance off by {:.1}%", 100.0 * dv)
            })?;
            worst_mean = worst_mean.max(z);
            worst_var = worst_var.max(dv);
        }
    }
    Ok(format!(
        "worst mean deviation {worst_mean:.2} standard errors, worst variance error {:.2}%",
        100.0 * worst_var
    ))
}

fn reverse_chain() -> Outcome {
    let sch = make_schedule(50, ScheduleKind::Linear, 1e-4, 0.2).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0: Vec<f64> = (0..25).map(|_| rng.sample(StandardNormal)).collect();
    let (mut z, _) = forward_sample(&z0, 50, &sch, &mut rng).map_err(e2s)?;
    for t in (1..=50).rev() {
        let ab = sch.alpha_bar(t);
        let eps: Vec<f64> = z
            .iter()
            .zip(&z0)
            .map(|(zt, z0)| (zt - ab.sqrt() * z0) / (1.0 - ab).sqrt())
            .collect();
        z = sch.reverse_mean(t, &z, &eps);
    }
    let err = z
        .iter()
        .zip(&z0)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(err < 1e-6, || format!("max abs error {err:e}"))?;
    Ok(format!("max abs error {err:e}"))
}

// ---- 6: equivariance ----

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("r{i}")).collect()
}

fn random_conditions(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ConditionSet {
    let feats: Vec<RegionFeature> = ids(n)
        .into_iter()
        .map(|id| RegionFeature {
            region_id: id,
            embedding: (0..d).map(|_| rng.sample(StandardNormal)).collect(),
            population: rng.random_range(100.0..5000.0),
        })
        .collect();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let v = rng.random_range(0.5..8.0);
            dist[i * n + j] = v;
            dist[j * n + i] = v;
        }
    }
    build_conditions(&feats)
        .unwrap()
        .with_distances(dist)
        .unwrap()
}

fn permute(m: &[f64], n: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = m[perm[i] * n + perm[j]];
        }
    }
    out
}

fn small_model(rng: &mut ChaCha8Rng, cond_dim: usize) -> TrainedModel {
    let cfg = DenoiserConfig {
        d_model: 16,
        heads: 2,
        layers: 2,
        edge_dim: 8,
        time_dim: 8,
        ..DenoiserConfig::new(cond_dim)
    };
    let stats_src = random_conditions(rng, 3, cond_dim - 1);
    TrainedModel {
        model: Denoiser::new(cfg, rng).unwrap(),
        codec: FlowCodec::new(3.0, 1.5).unwrap(),
        stats: stats_src.stats,
        schedule: make_schedule(30, ScheduleKind::Linear, 1e-3, 0.2).unwrap(),
        variance: ReverseVariance::Posterior,
    }
}

fn equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tm = small_model(&mut rng, 4);
    for trial in 0..20 {
        let n = 1 + trial % 5;
        let cond = random_conditions(&mut rng, n, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pc = cond.permuted(&perm);
        let z: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let t = rng.random_range(1..=30);
        let base = predict_noise(&tm.model, &z, t, &cond).map_err(e2s)?;
        let moved = predict_noise(&tm.model, &permute(&z, n, &perm), t, &pc).map_err(e2s)?;
        ensure(moved == permute(&base, n, &perm), || {
            format!("predict_noise, trial {trial}")
        })?;
        let seed = 100 + trial as u64;
        let a = generate(&tm, &cond, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(e2s)?;
        let mut noise = PermutedNoise {
            inner: RngNoise(&mut ChaCha8Rng::seed_from_u64(seed)),
            perm: perm.clone(),
        };
        let b = generate_with_noise(&tm, &pc, &mut noise).map_err(e2s)?;
        ensure(b == a.permuted(&perm), || {
            format!("generate, trial {trial}")
        })?;
    }
    Ok("20 trials, N in 1..=5, bit-identical".into())
}

// ---- 7, 8: synthetic corpus ----

struct Corpus {
    train: Vec<TrainingCity>,
    val: Vec<TrainingCity>,
    test: Vec<TrainingCity>,
    test_geos: Vec<Vec<odflow::physical::RegionGeo>>,
    gravity_fit: Vec<(Vec<odflow::physical::RegionGeo>, ODMatrix)>,
}

fn assemble(
    named: Vec<(String, CityBundle)>,
    split: [u32; 3],
    seed: u64,
) -> Result<Corpus, String> {
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let (tr, va, te) = split_corpus(&names, split, seed).map_err(e2s)?;
    let by_name: BTreeMap<String, CityBundle> = named.into_iter().collect();
    let feats: Vec<&[RegionFeature]> = tr.iter().map(|n| by_name[n].features.as_slice()).collect();
    let (stats, _) = build_corpus_conditions(&feats).map_err(e2s)?;
    let make = |n: &String| -> Result<TrainingCity, String> {
        let b = &by_name[n];
        let od = b.od.clone().ok_or("missing reference OD")?;
        TrainingCity::new(n.clone(), od, b.conditions(&stats).map_err(e2s)?).map_err(e2s)
    };
    Ok(Corpus {
        train: tr.iter().map(make).collect::<Result<_, _>>()?,
        val: va.iter().map(make).collect::<Result<_, _>>()?,
        test: te.iter().map(make).collect::<Result<_, _>>()?,
        test_geos: te.iter().map(|n| by_name[n].geos.clone()).collect(),
        gravity_fit: tr
            .iter()
            .map(|n| (by_name[n].geos.clone(), by_name[n].od.clone().unwrap()))
            .collect(),
    })
}

fn synth_bundle(c: &SynthCity) -> (String, CityBundle) {
    (
        c.name.clone(),
        CityBundle {
            region_ids: c.region_ids(),
            boundaries: c.boundaries.clone(),
            geos: c.geos.clone(),
            features: c.features.clone(),
            od: Some(c.od.clone()),
        },
    )
}

/// Mean test CPC with embedding columns (not population) row-shuffled when
/// `shuffle` is set.
fn mean_cpc(
    tm: &TrainedModel,
    test: &[TrainingCity],
    seed: u64,
    shuffle: bool,
) -> Result<f64, String> {
    let mut total = 0.0;
    for (k, c) in test.iter().enumerate() {
        let mut cond = c.cond.clone();
        if shuffle {
            let n = cond.n();
            let cols = cond.cols();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut substream(seed, "shuffle", k as u64));
            for i in 0..n {
                for q in 0..cols - 1 {
                    cond.x[i * cols + q] = c.cond.x[perm[i] * cols + q];
                }
            }
        }
        let g = generate(tm, &cond, &mut substream(seed, "sampling", k as u64)).map_err(e2s)?;
        total += cpc(c.od.flows(), g.flows()).map_err(e2s)?;
    }
    Ok(total / test.len() as f64)
}

struct MarginRun {
    model: TrainedModel,
    test: Vec<TrainingCity>,
    diffusion_cpc: f64,
}

fn margin() -> (Outcome, Option<MarginRun>) {
    let run = || -> Result<(String, MarginRun), String> {
        let cfg = SynthConfig {
            n_cities: 50,
            n_min: 15,
            n_max: 30,
            noise: 0.2,
            ..SynthConfig::default()
        };
        let synth = SynthModel::new(cfg.clone()).map_err(e2s)?;
        let cities: Vec<SynthCity> = (0..cfg.n_cities)
            .map(|i| synth.city(i))
            .collect::<Result<_, _>>()
            .map_err(e2s)?;
        let corpus = assemble(cities.iter().map(synth_bundle).collect(), [8, 1, 1], 0)?;
        ensure(
            (corpus.train.len(), corpus.val.len(), corpus.test.len()) == (40, 5, 5),
            || "split is not 40/5/5".into(),
        )?;

        let gp = fit_gravity(&corpus.gravity_fit, PairSelection::All).map_err(e2s)?;
        let (mut grav, mut rad) = (0.0, 0.0);
        for (c, geos) in corpus.test.iter().zip(&corpus.test_geos) {
            grav += cpc(c.od.flows(), gravity(geos, gp).map_err(e2s)?.flows()).map_err(e2s)?;
            let r =
                radiation(geos, &default_outflows(geos, DEFAULT_TRIP_RATE), false).map_err(e2s)?;
            rad += cpc(c.od.flows(), r.flows()).map_err(e2s)?;
        }
        let nt = corpus.test.len() as f64;
        let (grav, rad) = (grav / nt, rad / nt);

        let tc = TrainConfig {
            steps: 6000,
            lr_schedule: LrSchedule::Cosine,
            reverse_variance: ReverseVariance::Posterior,
            val_every: 1000,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let mut trainer = Trainer::new(tc, &corpus.train).map_err(e2s)?;
        trainer.run(&corpus.train, &corpus.val).map_err(e2s)?;
        let train_secs = t0.elapsed().as_secs_f64();
        let model = trainer.trained;
        let diff = mean_cpc(&model, &corpus.test, 0, false)?;
        let detail = format!(
            "diffusion CPC {diff:.4}, gravity {grav:.4} (beta {}), radiation {rad:.4}; {} steps in {train_secs:.0} s",
            gp.beta, trainer.step
        );
        ensure(diff - grav >= 0.05 && diff - rad >= 0.05, || detail.clone())?;
        Ok((
            detail,
            MarginRun {
                model,
                test: corpus.test,
                diffusion_cpc: diff,
            },
        ))
    };
    match run() {
        Ok((d, r)) => (Ok(d), Some(r)),
        Err(e) => (Err(e), None),
    }
}

fn ablation(run: Option<&MarginRun>) -> Outcome {
    let run = run.ok_or("needs the trained model from criterion 7")?;
    let mut drops = Vec::new();
    for seed in 0..3u64 {
        let base = if seed == 0 {
            run.diffusion_cpc
        } else {
            mean_cpc(&run.model, &run.test, seed, false)?
        };
        let shuffled = mean_cpc(&run.model, &run.test, seed, true)?;
        drops.push(base - shuffled);
    }
    let mean = drops.iter().sum::<f64>() / 3.0;
    let detail = format!(
        "mean CPC drop {mean:.4} (per seed {:.4}, {:.4}, {:.4})",
        drops[0], drops[1], drops[2]
    );
    ensure(mean >= 0.03, || detail.clone())?;
    Ok(detail)
}

// ---- 9: tiles ----

fn tile_geometry() -> Outcome {
    let z = 15;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = GeoPoint::new(
            rng.random_range(-180.0..180.0),
            rng.random_range(-85.0..85.0),
        )
        .map_err(e2s)?;
        let t = lonlat_to_tile(p, z).map_err(e2s)?;
        let (px, py) = lonlat_to_pixel(p, z);
        let col = (px - (t.x * TILE_SIZE) as f64).floor();
        let row = (py - (t.y * TILE_SIZE) as f64).floor();
        ensure(
            (0.0..TILE_SIZE as f64).contains(&col) && (0.0..TILE_SIZE as f64).contains(&row),
            || format!("{p:?} maps outside its tile"),
        )?;
        let back = pixel_to_lonlat(
            (t.x * TILE_SIZE) as f64 + col + 0.5,
            (t.y * TILE_SIZE) as f64 + row + 0.5,
            z,
        );
        let (bx, by) = lonlat_to_pixel(back, z);
        let d = (bx - px).abs().max((by - py).abs());
        ensure(d <= 0.5, || format!("{p:?}: round trip off by {d} px"))?;
        worst = worst.max(d);
    }
    let mut worst_fill = 0.0f64;
    let (mut k, mut tested) = (0, 0);
    while tested < 20 {
        k += 1;
        let c = GeoPoint::new(
            rng.random_range(-170.0..170.0),
            rng.random_range(-70.0..70.0),
        )
        .map_err(e2s)?;
        let (cx, cy) = lonlat_to_pixel(c, z);
        let radius = rng.random_range(40.0..300.0);
        let verts = rng.random_range(3..12);
        let mut angles: Vec<f64> = (0..verts)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        let mut ring: Vec<GeoPoint> = angles
            .iter()
            .map(|a| pixel_to_lonlat(cx + radius * a.cos(), cy + radius * a.sin(), z))
            .collect();
        ring.push(ring[0]);
        let poly = RegionBoundary::single(format!("p{k}"), ring, vec![]).map_err(e2s)?;
        let area = poly.projected_area(z);
        if area < 2000.0 {
            continue;
        }
        let bbox = TileRect::covering(&region_tiles(&poly, z).map_err(e2s)?).ok_or("no tiles")?;
        let w = (bbox.width() * TILE_SIZE) as usize;
        let h = (bbox.height() * TILE_SIZE) as usize;
        let mask = rasterize_mask(&poly, bbox.geo(), w, h).map_err(e2s)?;
        let err = (mask.popcount() as f64 / area - 1.0).abs();
        ensure(err <= 0.02, || {
            format!("polygon {k}: fill off by {:.2}%", 100.0 * err)
        })?;
        worst_fill = worst_fill.max(err);
        tested += 1;
    }
    Ok(format!(
        "round trip within {worst:.3} px; mask fill within {:.3}% of area",
        100.0 * worst_fill
    ))
}

// ---- 10: determinism ----

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tm = small_model(&mut rng, 4);
    let cond = random_conditions(&mut rng, 5, 3);
    let mut files = Vec::new();
    for k in 0..2 {
        let m = generate(&tm, &cond, &mut substream(42, "sampling", 0)).map_err(e2s)?;
        let p = dir.path().join(format!("g{k}.csv"));
        write_od(&m, &p, OdFormat::Dense).map_err(e2s)?;
        files.push(std::fs::read(&p).map_err(e2s)?);
    }
    ensure(files[0] == files[1], || "generated CSVs differ".into())?;

    let synth = SynthModel::new(SynthConfig {
        n_min: 5,
        n_max: 8,
        ..SynthConfig::default()
    })
    .map_err(e2s)?;
    let cities: Vec<_> = (0..10)
        .map(|i| synth.city(i).map(|c| synth_bundle(&c)))
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    let corpus = assemble(cities, [8, 1, 1], 0)?;
    let tc = TrainConfig {
        steps: 10,
        d_model: 16,
        heads: 2,
        layers: 1,
        edge_dim: 8,
        t_max: 20,
        ..TrainConfig::default()
    };
    let mut a = Trainer::new(tc.clone(), &corpus.train).map_err(e2s)?;
    for _ in 0..5 {
        a.step(&corpus.train).map_err(e2s)?;
    }
    let ck = dir.path().join("t.ckpt");
    a.to_checkpoint().save(&ck).map_err(e2s)?;
    let mut b = Trainer::from_checkpoint(tc, &Checkpoint::load(&ck).map_err(e2s)?).map_err(e2s)?;
    let la = a.step(&corpus.train).map_err(e2s)?;
    let lb = b.step(&corpus.train).map_err(e2s)?;
    ensure(la.to_bits() == lb.to_bits(), || {
        format!("next-step loss {la} vs {lb}")
    })?;
    Ok(format!(
        "{} byte CSVs identical; resumed loss {la} bit-exact",
        files[0].len()
    ))
}

// ---- 11: radiation ----

fn radiation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for inst in 0..50 {
        let n = rng.random_range(2..=30);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0..6) as f64, rng.random_range(0..6) as f64))
            .collect();
        let masses: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..5000u32) as f64)
            .collect();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                dist[i * n + j] =
                    ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
            }
        }
        let s = intervening_population(&masses, &dist);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut want = 0.0;
                for k in 0..n {
                    if k != i && k != j && dist[i * n + k] < dist[i * n + j] {
                        want += masses[k];
                    }
                }
                ensure(s[i * n + j] == want, || {
                    format!("instance {inst}: s[{i},{j}] = {} vs {want}", s[i * n + j])
                })?;
            }
        }
    }
    Ok("50 instances with ties, exact".into())
}

// ---- 12: end to end ----

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let cfg = SynthConfig {
        n_cities: 10,
        ..SynthConfig::default()
    };
    let names = write_corpus(dir.path(), &cfg, true).map_err(e2s)?;
    let mut bundles = Vec::new();
    for name in &names {
        let city_dir = dir.path().join(name);
        let mut b = load_city_dir(&city_dir).map_err(e2s)?;
        let tile_dir = city_dir.join(layout::TILES);
        for (f, boundary) in b.features.iter_mut().zip(&b.boundaries) {
            let (tiles, missing) = load_tiles(
                &tile_dir,
                &region_tiles(boundary, cfg.tile_zoom).map_err(e2s)?,
            )
            .map_err(e2s)?;
            ensure(missing.is_empty(), || format!("{name}: tiles missing"))?;
            let (img, mask) = region_raster(boundary, &tiles, cfg.tile_zoom).map_err(e2s)?;
            f.embedding = toy_extract(&img, &mask).map_err(e2s)?;
        }
        bundles.push((name.clone(), b));
    }
    let corpus = assemble(bundles, [8, 1, 1], 0)?;
    let tc = TrainConfig {
        steps: 2000,
        lr_schedule: LrSchedule::Cosine,
        reverse_variance: ReverseVariance::Posterior,
        val_every: 500,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(tc, &corpus.train).map_err(e2s)?;
    trainer.run(&corpus.train, &corpus.val).map_err(e2s)?;
    let mut lines = Vec::new();
    for (k, c) in corpus.test.iter().enumerate() {
        let g = generate(
            &trainer.trained,
            &c.cond,
            &mut substream(0, "sampling", k as u64),
        )
        .map_err(e2s)?;
        let path = dir.path().join(format!("{}.gen.csv", c.name));
        write_od(&g, &path, OdFormat::Edges).map_err(e2s)?;
        let back = read_od(&path, Some(c.od.region_ids())).map_err(e2s)?;
        let r = evaluate(&c.od, &back, PairSelection::All).map_err(e2s)?;
        let finite = [r.rmse, r.nrmse, r.cpc, r.spearman]
            .iter()
            .all(|v| v.is_finite());
        let line = format!("{}: cpc {:.4} spearman {:.4}", c.name, r.cpc, r.spearman);
        ensure(finite && r.spearman > 0.0, || line.clone())?;
        lines.push(line);
    }
    Ok(lines.join("; "))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |id: u32, name: &str, t0: Instant, r: Outcome| {
        let secs = t0.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("PASS [{id:>2}] {name} ({secs:.1} s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name} ({secs:.1} s): {d}");
            }
        }
    };
    let simple: [(u32, &str, fn() -> Outcome); 6] = [
        (1, "metric oracle equivalence", metric_oracle),
        (2, "hand-checkable metric values", metric_hand_values),
        (3, "autodiff gradient checks", autodiff),
        (4, "forward diffusion law", forward_law),
        (5, "reverse chain consistency", reverse_chain),
        (6, "permutation equivariance", equivariance),
    ];
    for (id, name, f) in simple {
        let t0 = Instant::now();
        report(id, name, t0, f());
    }
    let t0 = Instant::now();
    let (r7, run) = margin();
    report(7, "synthetic generalization margin", t0, r7);
    let t0 = Instant::now();
    report(8, "feature ablation", t0, ablation(run.as_ref()));
    let rest: [(u32, &str, fn() -> Outcome); 4] = [
        (9, "tile geometry", tile_geometry),
        (10, "determinism", determinism),
        (11, "radiation s_ij oracle", radiation_oracle),
        (12, "end-to-end pipeline", end_to_end),
    ];
    for (id, name, f) in rest {
        let t0 = Instant::now();
        report(id, name, t0, f());
    }
    println!(
        "acceptance: {} of 12 passed in {:.0} s",
        12 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
