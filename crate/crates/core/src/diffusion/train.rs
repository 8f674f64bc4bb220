use std::path::Path;

use log::{debug, info};
use rand::Rng;
use serde::Deserialize;

use super::codec::FlowCodec;
use super::denoiser::{Denoiser, DenoiserConfig};
use super::schedule::{
    forward_sample, make_schedule, noised, NoiseSchedule, ReverseVariance, ScheduleKind,
};
use crate::error::{Error, Result};
use crate::features::{ConditionSet, FeatureStats};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{AdamConfig, AdamState, Graph, Tensor};
use crate::od::ODMatrix;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to `lr / 20` over `steps`.
    Cosine,
}

/// Training and sampling settings, read from a flat TOML file.
///
/// ```toml
/// steps = 20000
/// t_max = 200
/// schedule = "linear"        # linear | cosine
/// beta_min = 5e-4
/// beta_max = 0.1
/// d_model = 64
/// heads = 4
/// layers = 3
/// edge_dim = 32
/// lr = 1e-3
/// lr_schedule = "constant"   # constant | cosine
/// seed = 0
/// split = [8, 1, 1]          # train : validation : test cities
/// val_every = 1000
/// reverse_variance = "marginal"   # marginal | posterior
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub t_max: usize,
    #[serde(deserialize_with = "parse_str")]
    pub schedule: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub edge_dim: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub split: [u32; 3],
    pub val_every: u64,
    #[serde(deserialize_with = "parse_str")]
    pub reverse_variance: ReverseVariance,
}

fn parse_str<'de, D, T>(d: D) -> std::result::Result<T, D::Error>
where
    D: serde::Deserializer<'de>,
    T: std::str::FromStr<Err = Error>,
{
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

impl Default for TrainConfig {
    fn default() -> Self {
        // the common 1000-step range 1e-4..0.02, rescaled to 200 steps
        TrainConfig {
            steps: 20_000,
            t_max: 200,
            schedule: ScheduleKind::Linear,
            beta_min: 5e-4,
            beta_max: 0.1,
            d_model: 64,
            heads: 4,
            layers: 3,
            edge_dim: 32,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            split: [8, 1, 1],
            val_every: 1000,
            reverse_variance: ReverseVariance::Marginal,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: TrainConfig = crate::error::parse_toml(text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Usage(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if self.split.iter().sum::<u32>() == 0 || self.split[0] == 0 {
            return Err(Error::Usage("split needs a positive training share".into()));
        }
        self.denoiser_config(1).validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_max, self.schedule, self.beta_min, self.beta_max)
    }

    pub fn denoiser_config(&self, cond_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            cond_dim,
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            edge_dim: self.edge_dim,
            ..DenoiserConfig::new(cond_dim)
        }
    }

    fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let p = (step as f64 / self.steps.max(1) as f64).min(1.0);
                let floor = self.lr / 20.0;
                floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

/// One training city: reference flows and conditions over the same regions.
#[derive(Debug, Clone)]
pub struct TrainingCity {
    pub name: String,
    pub od: ODMatrix,
    pub cond: ConditionSet,
}

impl TrainingCity {
    pub fn new(name: impl Into<String>, od: ODMatrix, cond: ConditionSet) -> Result<Self> {
        let name = name.into();
        if od.region_ids() != cond.region_ids.as_slice() {
            return Err(Error::Validation(format!(
                "city `{name}`: flow and condition regions differ"
            )));
        }
        Ok(TrainingCity { name, od, cond })
    }
}

/// Everything generation needs.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Denoiser,
    pub codec: FlowCodec,
    pub stats: FeatureStats,
    pub schedule: NoiseSchedule,
    pub variance: ReverseVariance,
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub trained: TrainedModel,
    pub adam: AdamState,
    pub step: u64,
}

impl Trainer {
    /// Fresh model; the codec is fitted on `train` and the feature statistics
    /// are taken from its condition sets, which must share one fit.
    pub fn new(config: TrainConfig, train: &[TrainingCity]) -> Result<Self> {
        config.validate()?;
        let first = train
            .first()
            .ok_or_else(|| Error::Validation("training corpus is empty".into()))?;
        let stats = first.cond.stats.clone();
        if train.iter().any(|c| c.cond.stats != stats) {
            return Err(Error::Validation(
                "training cities were standardized with different statistics".into(),
            ));
        }
        let codec = FlowCodec::fit(train.iter().map(|c| &c.od))?;
        let mut init = substream(config.seed, "init", 0);
        let model = Denoiser::new(config.denoiser_config(stats.cols()), &mut init)?;
        let adam = AdamState::new(
            &model.store,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Trainer {
            trained: TrainedModel {
                model,
                codec,
                stats,
                schedule: config.schedule()?,
                variance: config.reverse_variance,
            },
            adam,
            step: 0,
            config,
        })
    }

    /// One optimizer step on a randomly drawn city; returns its loss.
    pub fn step(&mut self, train: &[TrainingCity]) -> Result<f64> {
        let mut rng = substream(self.config.seed, "train", self.step);
        let ci = rng.random_range(0..train.len());
        let city = &train[ci];
        let t = rng.random_range(1..=self.trained.schedule.steps());
        let z0 = self.trained.codec.encode(&city.od);
        let (zt, eps) = forward_sample(&z0, t, &self.trained.schedule, &mut rng)?;
        let model = &mut self.trained.model;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &zt, t, &city.cond)?;
        let n = city.cond.n();
        let target = g.constant(Tensor::new(vec![n, n], eps)?);
        let loss = g.mse(out, target)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {value} at step {} (city `{}`, t = {t}); lower the learning rate",
                self.step, city.name
            )));
        }
        model.store.zero_grad();
        g.backward(loss, &mut model.store)?;
        self.adam.config.lr = self.config.lr_at(self.step);
        self.adam.step(&mut model.store);
        if !model.store.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters diverged at step {}",
                self.step
            )));
        }
        self.step += 1;
        Ok(value)
    }

    /// Mean noise-prediction loss on fixed draws: eight evenly spaced steps per city.
    pub fn validation_loss(&self, cities: &[TrainingCity]) -> Result<f64> {
        let tm = &self.trained;
        let steps = tm.schedule.steps();
        let mut total = 0.0;
        let mut count = 0;
        for (k, city) in cities.iter().enumerate() {
            let z0 = tm.codec.encode(&city.od);
            let mut rng = substream(self.config.seed, "validation", k as u64);
            for q in 0..8 {
                let t = 1 + (q * (steps - 1)) / 7;
                let eps: Vec<f64> = (0..z0.len())
                    .map(|_| rng.sample(rand_distr::StandardNormal))
                    .collect();
                let zt = noised(&z0, &eps, t, &tm.schedule);
                let pred = super::denoiser::predict_noise(&tm.model, &zt, t, &city.cond)?;
                total += pred
                    .iter()
                    .zip(&eps)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    / eps.len() as f64;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Validation("no validation cities".into()));
        }
        Ok(total / count as f64)
    }

    /// Runs until `config.steps`, logging a running loss and, every
    /// `val_every` steps, the validation loss.
    pub fn run(&mut self, train: &[TrainingCity], val: &[TrainingCity]) -> Result<()> {
        let mut running = 0.0;
        let mut seen = 0;
        while self.step < self.config.steps {
            running += self.step(train)?;
            seen += 1;
            let every = self.config.val_every.max(1);
            if self.step % every == 0 || self.step == self.config.steps {
                let mean = running / seen as f64;
                if val.is_empty() {
                    info!("step {}: train loss {mean:.4}", self.step);
                } else {
                    let v = self.validation_loss(val)?;
                    info!(
                        "step {}: train loss {mean:.4}, validation loss {v:.4}",
                        self.step
                    );
                }
                running = 0.0;
                seen = 0;
            } else if self.step % 100 == 0 {
                debug!(
                    "step {}: running loss {:.4}",
                    self.step,
                    running / seen as f64
                );
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.trained.to_checkpoint();
        let store = &self.trained.model.store;
        for id in store.ids() {
            let name = store.name(id);
            ck.insert(format!("adam.m.{name}"), self.adam.m[id.index()].clone());
            ck.insert(format!("adam.v.{name}"), self.adam.v[id.index()].clone());
        }
        let a = self.adam.config;
        ck.insert_values(
            "train.state",
            &[
                self.step as f64,
                self.adam.step as f64,
                a.lr,
                a.beta1,
                a.beta2,
                a.eps,
            ],
        );
        ck
    }

    /// Restores a run saved by [`Trainer::to_checkpoint`]; the architecture
    /// comes from the checkpoint, everything else from `config`.
    pub fn from_checkpoint(config: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let trained = TrainedModel::from_checkpoint(ck)?;
        let store = &trained.model.store;
        let mut adam = AdamState::new(store, AdamConfig::default());
        for id in store.ids() {
            let name = store.name(id);
            adam.m[id.index()] =
                same_shape(ck.require(&format!("adam.m.{name}"))?, store.value(id))?;
            adam.v[id.index()] =
                same_shape(ck.require(&format!("adam.v.{name}"))?, store.value(id))?;
        }
        let st = ck.require("train.state")?.data();
        if st.len() != 6 {
            return Err(Error::Validation("malformed train.state".into()));
        }
        adam.step = st[1] as u64;
        adam.config = AdamConfig {
            lr: st[2],
            beta1: st[3],
            beta2: st[4],
            eps: st[5],
        };
        Ok(Trainer {
            config,
            trained,
            adam,
            step: st[0] as u64,
        })
    }
}

fn same_shape(t: &Tensor, like: &Tensor) -> Result<Tensor> {
    if t.shape() != like.shape() {
        return Err(Error::Shape(format!(
            "checkpoint tensor {:?} vs parameter {:?}",
            t.shape(),
            like.shape()
        )));
    }
    Ok(t.clone())
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let c = &self.model.config;
        ck.insert_values(
            "meta.arch",
            &[
                c.cond_dim as f64,
                c.d_model as f64,
                c.heads as f64,
                c.layers as f64,
                c.edge_dim as f64,
                c.time_dim as f64,
            ],
        );
        ck.insert_values("schedule.beta", &self.schedule.beta);
        let var = match self.variance {
            ReverseVariance::Marginal => 0.0,
            ReverseVariance::Posterior => 1.0,
        };
        ck.insert_values("meta.variance", &[var]);
        ck.insert_values("codec", &[self.codec.mu, self.codec.sigma]);
        ck.insert_values("stats.mean", &self.stats.mean);
        ck.insert_values("stats.std", &self.stats.std);
        let store = &self.model.store;
        for id in store.ids() {
            ck.insert(format!("param.{}", store.name(id)), store.value(id).clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = ck.require("meta.arch")?.data();
        if arch.len() != 6 {
            return Err(Error::Validation("malformed meta.arch".into()));
        }
        let u = |k: usize| arch[k] as usize;
        let config = DenoiserConfig {
            cond_dim: u(0),
            d_model: u(1),
            heads: u(2),
            layers: u(3),
            edge_dim: u(4),
            time_dim: u(5),
        };
        // initial values are overwritten below
        let mut model = Denoiser::new(config, &mut substream(0, "init", 0))?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = format!("param.{}", model.store.name(id));
            let t = same_shape(ck.require(&name)?, model.store.value(id))?;
            *model.store.value_mut(id) = t;
        }
        let codec = ck.require("codec")?.data();
        if codec.len() != 2 {
            return Err(Error::Validation("malformed codec entry".into()));
        }
        let stats = FeatureStats {
            mean: ck.require("stats.mean")?.data().to_vec(),
            std: ck.require("stats.std")?.data().to_vec(),
        };
        if stats.mean.len() != config.cond_dim || stats.std.len() != config.cond_dim {
            return Err(Error::Validation(
                "feature statistics disagree with the model input width".into(),
            ));
        }
        let variance = match ck.require("meta.variance")?.data() {
            [v] if *v == 0.0 => ReverseVariance::Marginal,
            [v] if *v == 1.0 => ReverseVariance::Posterior,
            _ => return Err(Error::Validation("malformed meta.variance".into())),
        };
        Ok(TrainedModel {
            model,
            codec: FlowCodec::new(codec[0], codec[1])?,
            stats,
            schedule: NoiseSchedule::from_betas(ck.require("schedule.beta")?.data().to_vec())?,
            variance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Trains from scratch for `config.steps` steps.
pub fn train(train: &[TrainingCity], val: &[TrainingCity], config: TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(config, train)?;
    info!(
        "training {} parameters on {} cities for {} steps",
        t.trained.model.store.num_scalars(),
        train.len(),
        t.config.steps
    );
    t.run(train, val)?;
    Ok(t)
}
