//! Attention-module and objective ablations, averaged over seeds.

use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::Corpus;
use crate::error::Result;
use crate::train::{pretrain, probe, ProbeReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Objective {
    /// Intra- and inter-modality terms.
    CrossCl,
    /// Intra-modality terms only (`lambda = 0`).
    Scl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub name: &'static str,
    pub use_inter: bool,
    pub use_intra: bool,
    pub objective: Objective,
}

pub const FULL: Variant = Variant {
    name: "full",
    use_inter: true,
    use_intra: true,
    objective: Objective::CrossCl,
};

/// The four attention configurations under the cross-modal objective, then
/// the full architecture under the intra-only objective.
pub const VARIANTS: [Variant; 5] = [
    FULL,
    Variant {
        name: "inter_only",
        use_inter: true,
        use_intra: false,
        objective: Objective::CrossCl,
    },
    Variant {
        name: "intra_only",
        use_inter: false,
        use_intra: true,
        objective: Objective::CrossCl,
    },
    Variant {
        name: "neither",
        use_inter: false,
        use_intra: false,
        objective: Objective::CrossCl,
    },
    Variant {
        name: "full_scl",
        use_inter: true,
        use_intra: true,
        objective: Objective::Scl,
    },
];

impl Variant {
    /// `base` with this variant's modules and objective.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.model.use_inter = self.use_inter;
        cfg.model.use_intra = self.use_intra;
        if self.objective == Objective::Scl {
            cfg.loss.lambda = 0.0;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub per_seed: Vec<ProbeReport>,
    pub vision: f64,
    pub language: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// One comparison of the full model against another row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionCheck {
    pub against: &'static str,
    pub vision_margin: f64,
    pub language_margin: f64,
}

impl DirectionCheck {
    pub fn holds(&self) -> bool {
        self.vision_margin >= 0.0 && self.language_margin >= 0.0
    }
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    /// Full-model accuracy minus each other row's, per modality.
    pub fn direction_checks(&self) -> Vec<DirectionCheck> {
        let Some(full) = self.row(FULL.name) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter(|r| r.variant.name != FULL.name && r.variant.name != "neither")
            .map(|r| DirectionCheck {
                against: r.variant.name,
                vision_margin: full.vision - r.vision,
                language_margin: full.language - r.language,
            })
            .collect()
    }
}

fn mark(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "no"
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        writeln!(f, "Attention modules (CrossCL objective), test top-1 over seeds {}", seeds.join(", "))?;
        writeln!(f)?;
        writeln!(f, "| InterMCA | IntraMSA | vision | language |")?;
        writeln!(f, "|---|---|---|---|")?;
        for r in self.rows.iter().filter(|r| r.variant.objective == Objective::CrossCl) {
            writeln!(
                f,
                "| {} | {} | {:.2}% | {:.2}% |",
                mark(r.variant.use_inter),
                mark(r.variant.use_intra),
                100.0 * r.vision,
                100.0 * r.language
            )?;
        }
        writeln!(f)?;
        writeln!(f, "Objective (InterMCA + IntraMSA)")?;
        writeln!(f)?;
        writeln!(f, "| objective | vision | language |")?;
        writeln!(f, "|---|---|---|")?;
        let mut objectives = String::new();
        for r in self.rows.iter().filter(|r| r.variant.use_inter && r.variant.use_intra) {
            let name = match r.variant.objective {
                Objective::CrossCl => "CrossCL",
                Objective::Scl => "SCL",
            };
            let _ = writeln!(objectives, "| {name} | {:.2}% | {:.2}% |", 100.0 * r.vision, 100.0 * r.language);
        }
        write!(f, "{objectives}")
    }
}

/// Pre-trains and probes every variant once per seed in `cfg.ablation_seeds`.
/// The corpus is shared; only model initialization and batch order change.
pub fn ablate(cfg: &RunConfig, corpus: &Corpus, mut progress: impl FnMut(&Variant, u64, &ProbeReport)) -> Result<AblationTable> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for variant in &VARIANTS {
        let mut per_seed = Vec::with_capacity(cfg.ablation_seeds.len());
        for &seed in &cfg.ablation_seeds {
            let mut run_cfg = variant.apply(cfg);
            run_cfg.seed = seed;
            let run = pretrain(&run_cfg, corpus, None)?;
            let report = probe(&run_cfg, &run.model, corpus)?;
            progress(variant, seed, &report);
            per_seed.push(report);
        }
        let k = per_seed.len() as f64;
        rows.push(AblationRow {
            variant: *variant,
            vision: per_seed.iter().map(|r| r.vision).sum::<f64>() / k,
            language: per_seed.iter().map(|r| r.language).sum::<f64>() / k,
            per_seed,
        });
    }
    Ok(AblationTable {
        seeds: cfg.ablation_seeds.clone(),
        rows,
    })
}
