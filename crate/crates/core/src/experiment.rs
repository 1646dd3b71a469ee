//! Batch experiments: simulated annotation of a generated shape sequence under several
//! smoothness arms, compared against the manual painting baseline.
//!
//! Every arm of one seed starts from the same base model and sees the same shapes, so arm
//! differences come from the arm alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{generate_dataset_with, Family};
use crate::error::{Error, Result};
use crate::geom::Neighborhood;
use crate::nnet::{load_checkpoint, ModelParams};
use crate::oracle::{manual_baseline_clicks, run_simulated_session, OraclePolicy};
use crate::region::GrowConfig;
use crate::session::SessionConfig;
use crate::trainer::{pretrain, TrainConfig};

/// Offset between the shape streams of consecutive experiment seeds.
const SEED_STRIDE: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub family: Family,
    pub count: usize,
    pub part_count: usize,
    #[serde(default = "default_points")]
    pub points_n: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_points() -> usize {
    1024
}

fn default_noise() -> f64 {
    0.01
}

/// Where the base model comes from. With neither `checkpoint` nor `count`, sessions start
/// from a freshly initialized network.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub checkpoint: Option<PathBuf>,
    /// Shapes generated for pretraining; the family and class count follow `[dataset]`.
    pub count: Option<usize>,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Smoothness weight from the train config's schedule.
    Default,
    /// Smoothness disabled in every round.
    NoSmoothness,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Default => "default",
            Arm::NoSmoothness => "no_smoothness",
        }
    }

    fn apply(self, train: &TrainConfig) -> TrainConfig {
        let mut t = train.clone();
        if self == Arm::NoSmoothness {
            t.beta_schedule = vec![0.0];
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    pub baseline_brush: Neighborhood,
    /// Carry each finalized model into the next cloud of the sequence.
    pub continual: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0],
            arms: vec![Arm::Default, Arm::NoSmoothness],
            baseline_brush: Neighborhood::Knn { k: 16 },
            continual: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub policy: OraclePolicy,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grow: GrowConfig,
    #[serde(default = "default_normal_neighbors")]
    pub normal_neighbors: usize,
}

fn default_normal_neighbors() -> usize {
    SessionConfig::default().normal_neighbors
}

impl ExperimentConfig {
    /// Parses TOML; errors name the offending field path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().message().trim().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file. A relative checkpoint path is resolved against the file's folder.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config = Self::from_toml(&fs::read_to_string(path)?)?;
        if let (Some(ckpt), Some(dir)) = (config.pretrain.checkpoint.as_mut(), path.parent()) {
            if ckpt.is_relative() {
                *ckpt = dir.join(&*ckpt);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let field = |path: &str, e: Error| Error::Config { path: path.into(), message: e.to_string() };
        if self.dataset.count == 0 {
            return Err(field("dataset.count", Error::invalid("must be at least 1")));
        }
        if !self.dataset.family.supports(self.dataset.part_count) {
            return Err(field("dataset.part_count", Error::invalid("not supported by the family")));
        }
        if self.experiment.seeds.is_empty() || self.experiment.arms.is_empty() {
            return Err(field("experiment", Error::invalid("needs at least one seed and one arm")));
        }
        if self.pretrain.count == Some(0) {
            return Err(field("pretrain.count", Error::invalid("must be at least 1")));
        }
        self.policy.validate().map_err(|e| field("policy", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        self.grow.validate().map_err(|e| field("grow", e))?;
        self.experiment.baseline_brush.validate().map_err(|e| field("experiment.baseline_brush", e))?;
        self.session_config(Arm::Default, 0).validate().map_err(|e| field("normal_neighbors", e))
    }

    fn session_config(&self, arm: Arm, seed: u64) -> SessionConfig {
        let mut train = arm.apply(&self.train);
        train.rng_seed = self.train.rng_seed.wrapping_add(seed);
        SessionConfig { grow: self.grow, train, normal_neighbors: self.normal_neighbors }
    }
}

/// One annotated cloud of one arm and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudRow {
    pub seed: u64,
    pub arm: Arm,
    pub index: usize,
    pub cloud_id: String,
    pub seed_clicks: usize,
    pub correction_clicks: usize,
    pub total_clicks: usize,
    /// Running total over the sequence of this arm and seed.
    pub clicks_cumulative: usize,
    pub round1_corrections: usize,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub manual_clicks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub seed: u64,
    pub arm: Arm,
    pub index: usize,
    pub round: usize,
    pub clicks_cumulative: usize,
    pub accuracy: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub clouds: usize,
    pub mean_clicks: f64,
    pub mean_manual_clicks: f64,
    /// Mean framework clicks over mean manual clicks.
    pub click_ratio: f64,
    pub mean_round1_corrections: f64,
    pub mean_rounds: f64,
    /// Mean clicks over the first and last five positions of the sequence.
    pub mean_clicks_first5: f64,
    pub mean_clicks_last5: f64,
    pub all_exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<CloudRow>,
    pub rounds: Vec<RoundRow>,
    pub summary: Summary,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn base_model(config: &ExperimentConfig, seed: u64) -> Result<Option<ModelParams<f32>>> {
    if let Some(path) = &config.pretrain.checkpoint {
        return Ok(Some(load_checkpoint(&fs::read(path)?)?));
    }
    let Some(count) = config.pretrain.count else {
        return Ok(None);
    };
    let d = &config.dataset;
    let data = generate_dataset_with(
        d.family,
        count,
        d.part_count,
        config.pretrain.rng_seed.wrapping_add(seed.wrapping_mul(SEED_STRIDE)),
        d.points_n,
        d.noise_sigma,
    )?;
    let mut train = config.train.clone();
    train.rng_seed = train.rng_seed.wrapping_add(seed);
    Ok(Some(pretrain(&data, &train)?.params))
}

/// Runs every seed and arm. `log` receives one line per finished cloud.
pub fn run_experiment(config: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<ExperimentResult> {
    config.validate()?;
    let d = &config.dataset;
    let mut rows = Vec::new();
    let mut rounds = Vec::new();
    for &seed in &config.experiment.seeds {
        let base = base_model(config, seed)?;
        let clouds = generate_dataset_with(
            d.family,
            d.count,
            d.part_count,
            d.rng_seed.wrapping_add(seed.wrapping_mul(SEED_STRIDE)),
            d.points_n,
            d.noise_sigma,
        )?;
        let manual: Vec<usize> = clouds
            .iter()
            .map(|(c, l)| manual_baseline_clicks(c, l, config.experiment.baseline_brush))
            .collect::<Result<_>>()?;
        for &arm in &config.experiment.arms {
            let session_config = config.session_config(arm, seed);
            let mut model = base.clone();
            let mut cumulative = 0;
            for (index, (cloud, truth)) in clouds.iter().enumerate() {
                let sim = run_simulated_session(cloud, truth, model.as_ref(), &config.policy, &session_config)?;
                let r = sim.report;
                cumulative += r.total_clicks;
                log(&format!(
                    "seed {seed} {} cloud {index}: {} clicks ({} manual), {} rounds",
                    arm.name(),
                    r.total_clicks,
                    manual[index],
                    r.rounds_to_completion
                ));
                rounds.extend(r.rounds.iter().map(|rr| RoundRow {
                    seed,
                    arm,
                    index,
                    round: rr.round,
                    clicks_cumulative: rr.clicks_cumulative,
                    accuracy: rr.accuracy,
                    miou: rr.miou,
                }));
                rows.push(CloudRow {
                    seed,
                    arm,
                    index,
                    cloud_id: r.cloud_id.clone(),
                    seed_clicks: r.seed_clicks,
                    correction_clicks: r.correction_clicks,
                    total_clicks: r.total_clicks,
                    clicks_cumulative: cumulative,
                    round1_corrections: r.first_round_corrections(),
                    rounds: r.rounds_to_completion,
                    final_accuracy: r.final_accuracy,
                    manual_clicks: manual[index],
                });
                if config.experiment.continual {
                    model = Some((**sim.session.model()).clone());
                }
            }
        }
    }
    let summary = summarize(config, &rows);
    Ok(ExperimentResult { rows, rounds, summary })
}

fn summarize(config: &ExperimentConfig, rows: &[CloudRow]) -> Summary {
    let count = config.dataset.count;
    let arms = config
        .experiment
        .arms
        .iter()
        .map(|&arm| {
            let mine: Vec<&CloudRow> = rows.iter().filter(|r| r.arm == arm).collect();
            let clicks = mean(mine.iter().map(|r| r.total_clicks as f64));
            let manual = mean(mine.iter().map(|r| r.manual_clicks as f64));
            ArmSummary {
                arm,
                clouds: mine.len(),
                mean_clicks: clicks,
                mean_manual_clicks: manual,
                click_ratio: if manual > 0.0 { clicks / manual } else { 0.0 },
                mean_round1_corrections: mean(mine.iter().map(|r| r.round1_corrections as f64)),
                mean_rounds: mean(mine.iter().map(|r| r.rounds as f64)),
                mean_clicks_first5: mean(mine.iter().filter(|r| r.index < 5).map(|r| r.total_clicks as f64)),
                mean_clicks_last5: mean(
                    mine.iter().filter(|r| r.index + 5 >= count).map(|r| r.total_clicks as f64),
                ),
                all_exact: mine.iter().all(|r| r.final_accuracy == 1.0),
            }
        })
        .collect();
    Summary { name: config.experiment.name.clone(), seeds: config.experiment.seeds.clone(), arms }
}

impl ExperimentResult {
    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summary.arms.iter().find(|a| a.arm == arm)
    }

    pub fn clouds_csv(&self) -> String {
        let mut out = String::from(
            "seed,arm,index,cloud_id,seed_clicks,correction_clicks,total_clicks,clicks_cumulative,\
             round1_corrections,rounds,final_accuracy,manual_clicks\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{:.6},{}",
                r.seed,
                r.arm.name(),
                r.index,
                r.cloud_id,
                r.seed_clicks,
                r.correction_clicks,
                r.total_clicks,
                r.clicks_cumulative,
                r.round1_corrections,
                r.rounds,
                r.final_accuracy,
                r.manual_clicks
            );
        }
        out
    }

    pub fn rounds_csv(&self) -> String {
        let mut out = String::from("seed,arm,index,round,clicks_cumulative,accuracy,miou\n");
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6}",
                r.seed,
                r.arm.name(),
                r.index,
                r.round,
                r.clicks_cumulative,
                r.accuracy,
                r.miou
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }

    pub fn summary_markdown(&self) -> String {
        let s = &self.summary;
        let seeds: Vec<String> = s.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("# {}\n\nSeeds: {}\n\n", s.name, seeds.join(", "));
        out.push_str(
            "| arm | clouds | mean clicks | manual clicks | ratio | round-1 corrections | rounds | first 5 | last 5 | exact |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for a in &s.arms {
            let _ = writeln!(
                out,
                "| {} | {} | {:.2} | {:.2} | {:.3} | {:.2} | {:.2} | {:.2} | {:.2} | {} |",
                a.arm.name(),
                a.clouds,
                a.mean_clicks,
                a.mean_manual_clicks,
                a.click_ratio,
                a.mean_round1_corrections,
                a.mean_rounds,
                a.mean_clicks_first5,
                a.mean_clicks_last5,
                if a.all_exact { "yes" } else { "no" }
            );
        }
        out
    }

    /// Writes `clouds.csv`, `rounds.csv`, `summary.json` and `summary.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let files = [
            ("clouds.csv", self.clouds_csv()),
            ("rounds.csv", self.rounds_csv()),
            ("summary.json", self.summary_json()),
            ("summary.md", self.summary_markdown()),
        ];
        let mut written = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body)?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
family = "chair"
count = 2
part_count = 3
points_n = 96
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.policy, OraclePolicy::default());
        assert_eq!(c.experiment.arms, vec![Arm::Default, Arm::NoSmoothness]);
        assert_eq!(c.experiment.baseline_brush, Neighborhood::Knn { k: 16 });
        let again = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = format!("{MINIMAL}\n[train]\nlearning_rate = \"fast\"\n");
        match ExperimentConfig::from_toml(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.learning_rate"),
            other => panic!("unexpected {other:?}"),
        }
        let unknown = format!("{MINIMAL}\n[policy]\nseeds_per_clas = 2\n");
        assert!(matches!(ExperimentConfig::from_toml(&unknown), Err(Error::Config { .. })));
        let invalid = MINIMAL.replace("part_count = 3", "part_count = 5");
        match ExperimentConfig::from_toml(&invalid) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "dataset.part_count"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn arms_differ_only_in_smoothness() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let a = c.session_config(Arm::Default, 3);
        let b = c.session_config(Arm::NoSmoothness, 3);
        assert_eq!(a.train.rng_seed, b.train.rng_seed);
        assert_eq!(b.train.beta_schedule, vec![0.0]);
        assert_eq!(a.train.beta_schedule, c.train.beta_schedule);
    }
}
