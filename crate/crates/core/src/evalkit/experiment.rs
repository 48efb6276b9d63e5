use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envlab::{Dataset, Env};
use crate::error::{Error, Result};
use crate::lm::Corpus;
use crate::transformer::Transformer;

use super::{bootstrap_ci, finetune, median, EvalReport, FinetuneConfig, Init};

/// Named comparison studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    /// Random init, no auxiliary losses.
    DtBaseline,
    /// Pretrained init against random init.
    Transfer,
    /// Finetuning everything against training only the projections.
    Freeze,
    /// Full method, without alignment, without co-training, with random positions.
    Ablation,
    /// Base context against three times the base context.
    Context,
    /// Randomly initialised models of increasing size.
    Size,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: FinetuneConfig,
    /// Whether the pretrained model is passed to the run (as weights or, for
    /// random init, as the architecture).
    pub use_reference: bool,
}

impl Recipe {
    pub const ALL: [Recipe; 6] = [
        Recipe::DtBaseline,
        Recipe::Transfer,
        Recipe::Freeze,
        Recipe::Ablation,
        Recipe::Context,
        Recipe::Size,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown recipe `{name}`")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Recipe::DtBaseline => "dt-baseline",
            Recipe::Transfer => "transfer",
            Recipe::Freeze => "freeze",
            Recipe::Ablation => "ablation",
            Recipe::Context => "context",
            Recipe::Size => "size",
        }
    }

    pub fn variants(&self, base: &FinetuneConfig) -> Vec<Variant> {
        let v = |name: &str, f: &dyn Fn(&mut FinetuneConfig)| {
            let mut config = base.clone();
            f(&mut config);
            Variant {
                name: name.to_string(),
                config,
                use_reference: true,
            }
        };
        let dt = |c: &mut FinetuneConfig| {
            c.init = Init::Random;
            c.loss.lambda1 = 0.0;
            c.loss.lambda2 = 0.0;
        };
        let pretrained = |c: &mut FinetuneConfig| c.init = Init::Pretrained;
        match self {
            Recipe::DtBaseline => vec![v("dt", &dt)],
            Recipe::Transfer => vec![v("pretrained", &pretrained), v("random", &dt)],
            Recipe::Freeze => vec![
                v("finetuned", &pretrained),
                v("frozen", &|c| {
                    pretrained(c);
                    c.freeze = true;
                    // no trainable parameter sees the language loss
                    c.loss.lambda2 = 0.0;
                }),
            ],
            Recipe::Ablation => vec![
                v("full", &pretrained),
                v("no-lcos", &|c| {
                    pretrained(c);
                    c.loss.lambda1 = 0.0;
                }),
                v("no-lm", &|c| {
                    pretrained(c);
                    c.loss.lambda2 = 0.0;
                }),
                v("random-pos", &|c| {
                    pretrained(c);
                    c.random_positions = true;
                }),
            ],
            Recipe::Context => {
                let k = base.context;
                vec![
                    v(&format!("k{k}"), &pretrained),
                    v(&format!("k{}", 3 * k), &|c| {
                        pretrained(c);
                        c.context = 3 * k;
                    }),
                ]
            }
            Recipe::Size => ["tiny", "small", "600k"]
                .into_iter()
                .map(|s| Variant {
                    use_reference: false,
                    ..v(s, &|c| {
                        dt(c);
                        c.size = s.to_string();
                    })
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub seeds: Vec<u64>,
    pub base: FinetuneConfig,
}

pub struct ExperimentOutput {
    /// Variant-major, seeds in order.
    pub reports: Vec<EvalReport>,
    pub files: Vec<PathBuf>,
}

impl ExperimentOutput {
    pub fn variant(&self, name: &str) -> Vec<&EvalReport> {
        self.reports.iter().filter(|r| r.variant == name).collect()
    }
}

fn write(path: PathBuf, body: impl AsRef<[u8]>, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(())
}

/// Runs every variant of the recipe for every seed. With `out_dir`, writes
/// per-run reports and metrics plus the comparison tables:
/// `comparison.csv` (one row per run), `scores.csv` and `convergence.csv`
/// (variant × seed) and `summary.csv` (medians and bootstrap intervals).
pub fn run_experiment(
    config: &ExperimentConfig,
    data: &Dataset,
    env: &Env,
    reference: Option<&Transformer>,
    corpus: Option<&Corpus>,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutput> {
    if config.seeds.is_empty() {
        return Err(Error::Config("an experiment needs at least one seed".into()));
    }
    let variants = config.recipe.variants(&config.base);
    if reference.is_none() && variants.iter().any(|v| v.config.init == Init::Pretrained) {
        return Err(Error::Config(format!(
            "recipe `{}` has pretrained variants but no checkpoint was given",
            config.recipe.name()
        )));
    }
    let mut files = Vec::new();
    if let Some(dir) = out_dir {
        for sub in ["reports", "metrics"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let mut reports = Vec::new();
    for v in &variants {
        let r = if v.use_reference { reference } else { None };
        for &seed in &config.seeds {
            let out = finetune(&v.config, data, env, r, corpus, seed, &v.name)?;
            if let Some(dir) = out_dir {
                let stem = format!("{}_seed{seed}", v.name);
                let json = serde_json::to_vec_pretty(&out.report).expect("report serialises");
                write(dir.join("reports").join(format!("{stem}.json")), json, &mut files)?;
                let m = dir.join("metrics").join(format!("{stem}.csv"));
                out.write_metrics(&m)?;
                files.push(m);
            }
            reports.push(out.report);
        }
    }
    if let Some(dir) = out_dir {
        let mut long = String::from("variant,seed,best_normalized,convergence_step,final_normalized\n");
        for r in &reports {
            long.push_str(&format!(
                "{},{},{},{},{}\n",
                r.variant,
                r.seed,
                r.best_normalized,
                r.convergence_step,
                r.final_normalized()
            ));
        }
        write(dir.join("comparison.csv"), long, &mut files)?;

        let head: Vec<String> = config.seeds.iter().map(|s| format!("seed_{s}")).collect();
        let header = format!("variant,{}\n", head.join(","));
        let (mut scores, mut conv) = (header.clone(), header);
        let mut summary = String::from("variant,median_best,ci_low,ci_high,median_convergence\n");
        for v in &variants {
            let rs: Vec<&EvalReport> = reports.iter().filter(|r| r.variant == v.name).collect();
            let best: Vec<f64> = rs.iter().map(|r| r.best_normalized).collect();
            let steps: Vec<f64> = rs.iter().map(|r| r.convergence_step as f64).collect();
            let cells = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            scores.push_str(&format!("{},{}\n", v.name, cells(&best)));
            conv.push_str(&format!("{},{}\n", v.name, cells(&steps)));
            let (lo, hi) = bootstrap_ci(&best, 2000, 0.95, 0)?;
            summary.push_str(&format!("{},{},{},{},{}\n", v.name, median(&best), lo, hi, median(&steps)));
        }
        write(dir.join("scores.csv"), scores, &mut files)?;
        write(dir.join("convergence.csv"), conv, &mut files)?;
        write(dir.join("summary.csv"), summary, &mut files)?;
    }
    Ok(ExperimentOutput { reports, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_has_four_variants() {
        let names: Vec<String> = Recipe::Ablation.variants(&FinetuneConfig::desk()).into_iter().map(|v| v.name).collect();
        assert_eq!(names, ["full", "no-lcos", "no-lm", "random-pos"]);
    }

    #[test]
    fn dt_baseline_is_the_plain_objective() {
        let v = &Recipe::DtBaseline.variants(&FinetuneConfig::default())[0];
        assert_eq!(v.config.init, Init::Random);
        assert_eq!((v.config.loss.lambda1, v.config.loss.lambda2), (0.0, 0.0));
    }

    #[test]
    fn recipe_names_round_trip() {
        for r in Recipe::ALL {
            assert_eq!(Recipe::parse(r.name()).unwrap(), r);
        }
    }
}
