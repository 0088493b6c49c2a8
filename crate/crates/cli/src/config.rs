//! Run configuration as flat `section.key = value` text.

use std::path::{Path, PathBuf};

use lorenz_tower::correlation::Observable;
use lorenz_tower::interval_partition::PartitionConfig;
use lorenz_tower::kv::KvBlock;
use lorenz_tower::random_driver::{FamilyRange, ScaleRule};
use lorenz_tower::return_engine::{FullReturnConfig, T_STAR_CAP};
use lorenz_tower::{Error, Result};

/// Exact construction with pruning, or stratified point sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BuildMode {
    Exact,
    Sampled,
}

impl BuildMode {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(BuildMode::Exact),
            "sampled" => Ok(BuildMode::Sampled),
            _ => Err(Error::Config(format!("mode must be exact or sampled, got '{s}'"))),
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            BuildMode::Exact => "exact",
            BuildMode::Sampled => "sampled",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionRun {
    pub n_cap: usize,
    pub mode: BuildMode,
    pub n_samples: usize,
    pub min_piece_rel: f64,
    pub fit_range: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub family: FamilyRange,
    pub partition: PartitionConfig,
    /// δ̄ as a fraction of δ.
    pub bar_delta_rel: f64,
    pub t_star_cap: usize,
    pub beta_min: f64,
    pub seed: u64,
    pub ensemble: usize,
    pub escape: PartitionRun,
    pub returns: PartitionRun,
    pub tower_height: usize,
    pub tower_pairs: usize,
    pub tower_sep_cap: usize,
    pub bins: usize,
    pub burn_in: usize,
    pub n_push: usize,
    pub corr_n_max: usize,
    pub phi: Observable,
    pub psi: Observable,
    pub min_r2: f64,
    pub corr_min_r2: f64,
    pub check_samples: usize,
    pub check_n_max: usize,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            family: FamilyRange::new(0.55, 0.95, ScaleRule::FullBranch, 0.45).expect("default range"),
            partition: PartitionConfig::new(3, 6, 0.45).expect("default partition"),
            bar_delta_rel: 0.1,
            t_star_cap: T_STAR_CAP,
            beta_min: 1e-9,
            seed: 1,
            ensemble: 1,
            escape: PartitionRun {
                n_cap: 200,
                mode: BuildMode::Sampled,
                n_samples: 20_000,
                min_piece_rel: 1e-9,
                fit_range: (5, 40),
            },
            returns: PartitionRun {
                n_cap: 80,
                mode: BuildMode::Sampled,
                n_samples: 20_000,
                min_piece_rel: 1e-6,
                fit_range: (10, 60),
            },
            tower_height: 20,
            tower_pairs: 2000,
            tower_sep_cap: 6,
            bins: 4096,
            burn_in: 60,
            n_push: 50,
            corr_n_max: 40,
            phi: Observable::Coordinate,
            psi: Observable::Coordinate,
            min_r2: 0.9,
            corr_min_r2: 0.85,
            check_samples: 2000,
            check_n_max: 50,
            output: PathBuf::from("out"),
        }
    }
}

fn run_kv(r: &PartitionRun) -> KvBlock {
    let mut kv = KvBlock::new();
    kv.set("n_cap", r.n_cap);
    kv.set("mode", r.mode.as_str());
    kv.set("n_samples", r.n_samples);
    kv.set_f64("min_piece_rel", r.min_piece_rel);
    kv.set("fit_lo", r.fit_range.0);
    kv.set("fit_hi", r.fit_range.1);
    kv
}

fn run_from_kv(kv: &KvBlock, d: &PartitionRun) -> Result<PartitionRun> {
    let mode = match kv.get_str("mode") {
        Some(s) => BuildMode::parse(s)?,
        None => d.mode,
    };
    Ok(PartitionRun {
        n_cap: kv.get_or("n_cap", d.n_cap)?,
        mode,
        n_samples: kv.get_or("n_samples", d.n_samples)?,
        min_piece_rel: kv.get_or("min_piece_rel", d.min_piece_rel)?,
        fit_range: (kv.get_or("fit_lo", d.fit_range.0)?, kv.get_or("fit_hi", d.fit_range.1)?),
    })
}

impl RunConfig {
    pub fn to_kv(&self) -> KvBlock {
        let mut kv = KvBlock::new();
        kv.merge_section("family", &self.family.to_kv());
        kv.merge_section("partition", &self.partition.to_kv());
        let mut ret = KvBlock::new();
        ret.set_f64("bar_delta_rel", self.bar_delta_rel);
        ret.set("t_star_cap", self.t_star_cap);
        ret.set_f64("beta_min", self.beta_min);
        kv.merge_section("return", &ret);
        let mut run = KvBlock::new();
        run.set("seed", self.seed);
        run.set("ensemble", self.ensemble);
        run.set("output", self.output.display());
        run.set("check_samples", self.check_samples);
        run.set("check_n_max", self.check_n_max);
        run.set_f64("min_r2", self.min_r2);
        kv.merge_section("run", &run);
        kv.merge_section("escape", &run_kv(&self.escape));
        kv.merge_section("returns", &run_kv(&self.returns));
        let mut tower = KvBlock::new();
        tower.set("height", self.tower_height);
        tower.set("pairs", self.tower_pairs);
        tower.set("sep_cap", self.tower_sep_cap);
        kv.merge_section("tower", &tower);
        let mut m = KvBlock::new();
        m.set("bins", self.bins);
        m.set("burn_in", self.burn_in);
        m.set("n_push", self.n_push);
        kv.merge_section("measure", &m);
        let mut c = KvBlock::new();
        c.set("n_max", self.corr_n_max);
        c.set("phi", &self.phi);
        c.set("psi", &self.psi);
        c.set_f64("min_r2", self.corr_min_r2);
        kv.merge_section("correlations", &c);
        kv
    }

    /// Missing keys take their defaults; unknown keys are rejected.
    pub fn from_kv(kv: &KvBlock) -> Result<Self> {
        let d = Self::default();
        let known = d.to_kv();
        for k in kv.keys() {
            if known.get_str(k).is_none() {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
        }
        let fam = kv.section("family");
        let family = FamilyRange::new(
            fam.get_or("lambda_lo", d.family.lambda_lo)?,
            fam.get_or("lambda_hi", d.family.lambda_hi)?,
            match fam.get_str("a_rule") {
                Some(s) => ScaleRule::parse(s)?,
                None => d.family.a_rule,
            },
            fam.get_or("alpha", d.family.alpha)?,
        )?;
        let part = kv.section("partition");
        let partition = PartitionConfig::new(
            part.get_or("r0", d.partition.r0)?,
            part.get_or("r_star", d.partition.r_star)?,
            part.get_or("alpha", d.partition.alpha)?,
        )?;
        let ret = kv.section("return");
        let run = kv.section("run");
        let tower = kv.section("tower");
        let m = kv.section("measure");
        let c = kv.section("correlations");
        let obs = |key: &str, dflt: &Observable| -> Result<Observable> {
            c.get_str(key).map_or(Ok(dflt.clone()), str::parse)
        };
        let cfg = Self {
            family,
            partition,
            bar_delta_rel: ret.get_or("bar_delta_rel", d.bar_delta_rel)?,
            t_star_cap: ret.get_or("t_star_cap", d.t_star_cap)?,
            beta_min: ret.get_or("beta_min", d.beta_min)?,
            seed: run.get_or("seed", d.seed)?,
            ensemble: run.get_or("ensemble", d.ensemble)?,
            escape: run_from_kv(&kv.section("escape"), &d.escape)?,
            returns: run_from_kv(&kv.section("returns"), &d.returns)?,
            tower_height: tower.get_or("height", d.tower_height)?,
            tower_pairs: tower.get_or("pairs", d.tower_pairs)?,
            tower_sep_cap: tower.get_or("sep_cap", d.tower_sep_cap)?,
            bins: m.get_or("bins", d.bins)?,
            burn_in: m.get_or("burn_in", d.burn_in)?,
            n_push: m.get_or("n_push", d.n_push)?,
            corr_n_max: c.get_or("n_max", d.corr_n_max)?,
            phi: obs("phi", &d.phi)?,
            psi: obs("psi", &d.psi)?,
            min_r2: run.get_or("min_r2", d.min_r2)?,
            corr_min_r2: c.get_or("min_r2", d.corr_min_r2)?,
            check_samples: run.get_or("check_samples", d.check_samples)?,
            check_n_max: run.get_or("check_n_max", d.check_n_max)?,
            output: run.get_str("output").map_or(d.output, PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.ensemble == 0 {
            return bad("run.ensemble must be at least 1");
        }
        for (name, r) in [("escape", &self.escape), ("returns", &self.returns)] {
            if r.n_cap == 0 || r.n_samples == 0 || r.fit_range.0 >= r.fit_range.1 {
                return bad(&format!("{name}: n_cap and n_samples must be positive and fit_lo < fit_hi"));
            }
        }
        if self.bins < 2 || self.tower_height == 0 || self.tower_sep_cap < 2 || self.corr_n_max == 0 {
            return bad("measure.bins >= 2, tower.height >= 1, tower.sep_cap >= 2 and correlations.n_max >= 1");
        }
        self.return_config().map(|_| ())
    }

    pub fn return_config(&self) -> Result<FullReturnConfig> {
        FullReturnConfig::for_range_with(
            &self.partition,
            &self.family,
            self.bar_delta_rel,
            self.t_star_cap,
            self.beta_min,
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvBlock::parse(text)?)
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
