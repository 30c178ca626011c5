//! Fusion study on the split-signal fixture: pretrain both models, then
//! compare continued training with combined, VEM-only and ML-only fusion
//! started from the same pretrained parameters. The fixture is fixed by
//! `fixture.seed`; the run seed drives initialization, shuffling and
//! densification.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::TiePolicy;
use crate::fixtures::{generate_split_signal, SyntheticSpec};
use crate::kg::augment_inverse;
use crate::losses::{FusionConfig, RelationSelection};
use crate::rng::SeedStream;
use crate::structure::{StructConfig, StructModel};
use crate::text::{build_vocab, Pooling, TextConfig, TextModel};
use crate::trainer::{
    continue_structure, continue_text, dev_metrics_structure, dev_metrics_text, fuse,
    pretrain_structure, pretrain_text, RunLog, TrainConfig, TrainData,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub fixture: SyntheticSpec,
    pub train: TrainConfig,
    pub structure: StructConfig,
    pub text: TextConfig,
    pub fusion: FusionConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            fixture: SyntheticSpec::default(),
            train: TrainConfig {
                lr_struct: 3e-3,
                lr_text: 3e-3,
                pretrain_epochs: 100,
                fusion_epochs: 30,
                eval_every: 10,
                dev_limit: None,
                tie_policy: TiePolicy::Expected,
                ..TrainConfig::default()
            },
            structure: StructConfig::default(),
            text: TextConfig {
                attention: false,
                pooling: Pooling::Mean,
                ..TextConfig::default()
            },
            fusion: FusionConfig {
                relation_selection: RelationSelection::Softmax,
                selection_temperature: 10.0,
                ..FusionConfig::cn100k()
            },
        }
    }
}

impl StudyConfig {
    /// Mimicry terms off.
    pub fn vem_only(&self) -> FusionConfig {
        FusionConfig {
            alpha_s: 0.0,
            beta_s: 0.0,
            ..self.fusion.clone()
        }
    }

    /// Generated-query terms and densification off.
    pub fn ml_only(&self) -> FusionConfig {
        FusionConfig {
            alpha_t: 0.0,
            beta_t: 0.0,
            n: 0,
            m: 0,
            ..self.fusion.clone()
        }
    }
}

/// Dev MRR of both models after some stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMrr {
    pub structure: f64,
    pub text: f64,
}

impl PairMrr {
    pub fn best(&self) -> f64 {
        self.structure.max(self.text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub seed: u64,
    pub pretrained: PairMrr,
    pub continued: PairMrr,
    /// Chosen-model dev MRR of each fusion variant.
    pub combined: f64,
    pub vem_only: f64,
    pub ml_only: f64,
    pub fused: PairMrr,
    pub wall_clock_s: f64,
}

impl StudyResult {
    pub fn gain(&self) -> f64 {
        self.combined - self.continued.best()
    }
}

pub fn run_study(cfg: &StudyConfig, seed: u64) -> Result<StudyResult> {
    let start = Instant::now();
    let fixture = generate_split_signal(&cfg.fixture)?;
    let (graph, split) = augment_inverse(&fixture.graph, &fixture.split)?;
    let data = TrainData::new(graph, split)?;
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let init = SeedStream::new(seed).child("init");
    let mut p = StructModel::<f32>::new(
        cfg.structure.clone(),
        data.graph.num_entities(),
        data.graph.num_relations(),
        &mut init.rng("structure"),
    )?;
    let vocab = Arc::new(build_vocab(data.graph.text(), cfg.text.min_count));
    let mut q = TextModel::<f32>::new(
        cfg.text.clone(),
        vocab,
        data.graph.text(),
        data.graph.num_entities(),
        &mut init.rng("text"),
    )?;
    let mut log = RunLog::new();
    pretrain_structure(&mut p, &data, &tc, &mut log)?;
    pretrain_text(&mut q, &data, &tc, &mut log)?;
    let pretrained = PairMrr {
        structure: dev_metrics_structure(&p, &data, &tc, None)?.mrr,
        text: dev_metrics_text(&q, &data, &tc, None)?.mrr,
    };

    let (mut pc, mut qc) = (p.clone(), q.clone());
    continue_structure(&mut pc, &data, &tc, tc.fusion_epochs, &mut log)?;
    continue_text(&mut qc, &data, &tc, tc.fusion_epochs, &mut log)?;
    let continued = PairMrr {
        structure: dev_metrics_structure(&pc, &data, &tc, None)?.mrr,
        text: dev_metrics_text(&qc, &data, &tc, None)?.mrr,
    };

    let mut run = |fusion: &FusionConfig| -> Result<(f64, PairMrr)> {
        let (mut pf, mut qf) = (p.clone(), q.clone());
        let out = fuse(&mut pf, &mut qf, &data, fusion, &tc, &mut log)?;
        let pair = PairMrr {
            structure: out.dev_structure.mrr,
            text: out.dev_text.mrr,
        };
        Ok((out.chosen_mrr(), pair))
    };
    let (combined, fused) = run(&cfg.fusion)?;
    let (vem_only, _) = run(&cfg.vem_only())?;
    let (ml_only, _) = run(&cfg.ml_only())?;
    Ok(StudyResult {
        seed,
        pretrained,
        continued,
        combined,
        vem_only,
        ml_only,
        fused,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}
