//! End-to-end runs: training pairs per seed, the backbone pre-train, variant
//! training and the multi-seed ablation on a shared suite.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{synthetic_pairs, Sequence, TrainingPair};
use crate::error::Result;
use crate::eval::{run_ablation, AblationEntry, AblationTable};
use crate::net::init_params;
use crate::params::Params;
use crate::training::{pretrain_backbone, prepare_examples, train, Example, LogRow, TrainConfig, TrainLog, Variant};

pub fn training_pairs(cfg: &Config, seed: u64) -> Result<Vec<TrainingPair>> {
    synthetic_pairs(&cfg.scene, cfg.train.videos, &cfg.train.pairs, &cfg.net, seed)
}

/// Pairs from scenes no training seed generates, with features under
/// `params`.
pub fn held_out_examples(cfg: &Config, params: &Params) -> Result<Vec<Example>> {
    let scene = crate::data::SyntheticSceneConfig {
        name: "held_out".into(),
        ..cfg.scene.clone()
    };
    let pairs = synthetic_pairs(
        &scene,
        cfg.experiment.held_out_videos,
        &cfg.train.pairs,
        &cfg.net,
        cfg.experiment.held_out_seed,
    )?;
    prepare_examples(pairs, params, &cfg.net)
}

pub fn initial_params(cfg: &Config, seed: u64) -> Result<Params> {
    init_params(&cfg.net, &mut ChaCha8Rng::seed_from_u64(seed), false)
}

/// A pre-trained backbone and its cached training examples.
pub struct Prepared {
    pub seed: u64,
    pub params: Params,
    pub pretrain_log: Vec<LogRow>,
    pub examples: Vec<Example>,
}

pub fn prepare(cfg: &Config, seed: u64, log: Option<&mut TrainLog>) -> Result<Prepared> {
    let pairs = training_pairs(cfg, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let out = pretrain_backbone(&cfg.net, &train_cfg, &pairs, initial_params(cfg, seed)?, log)?;
    log::info!("seed {seed}: pre-trained {} steps", out.steps);
    let examples = prepare_examples(pairs, &out.params, &cfg.net)?;
    Ok(Prepared {
        seed,
        params: out.params,
        pretrain_log: out.log,
        examples,
    })
}

/// The variant whose training run a variant is tracked with: `no_U`
/// reuses the `ours` parameters.
pub fn trained_as(v: Variant) -> Variant {
    match v {
        Variant::NoU => Variant::Ours,
        v => v,
    }
}

pub struct SeedRun {
    pub seed: u64,
    pub params: BTreeMap<Variant, Params>,
    pub logs: BTreeMap<Variant, Vec<LogRow>>,
}

impl SeedRun {
    pub fn entries(&self, variants: &[Variant]) -> Vec<AblationEntry<'_>> {
        variants
            .iter()
            .map(|&v| AblationEntry {
                label: v.name().to_string(),
                variant: v,
                params: self.params.get(&trained_as(v)),
            })
            .collect()
    }
}

pub fn train_variants(cfg: &Config, prepared: &Prepared, variants: &[Variant]) -> Result<SeedRun> {
    let mut run = SeedRun {
        seed: prepared.seed,
        params: BTreeMap::new(),
        logs: BTreeMap::new(),
    };
    for v in variants.iter().map(|&v| trained_as(v)) {
        if run.params.contains_key(&v) {
            continue;
        }
        let train_cfg = TrainConfig {
            variant: v,
            seed: prepared.seed,
            ..cfg.train.clone()
        };
        let out = train(&cfg.net, &train_cfg, &prepared.examples, prepared.params.clone(), None)?;
        log::info!("seed {}: trained {v} for {} steps", prepared.seed, out.steps);
        run.params.insert(v, out.params);
        run.logs.insert(v, out.log);
    }
    Ok(run)
}

/// For every configured seed: pre-train, train `variants`, then evaluate
/// them all on `suite`.
pub fn run_seeds(cfg: &Config, variants: &[Variant], suite: &[Sequence]) -> Result<Vec<(SeedRun, AblationTable)>> {
    let mut out = Vec::with_capacity(cfg.experiment.seeds.len());
    for &seed in &cfg.experiment.seeds {
        let prepared = prepare(cfg, seed, None)?;
        let run = train_variants(cfg, &prepared, variants)?;
        drop(prepared);
        let table = run_ablation(&run.entries(variants), &cfg.net, &cfg.track, suite, cfg.experiment.workers)?;
        out.push((run, table));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_update_rows_share_the_ours_parameters() {
        let mut params = BTreeMap::new();
        params.insert(Variant::Ours, Params::new());
        let run = SeedRun {
            seed: 0,
            params,
            logs: BTreeMap::new(),
        };
        let e = run.entries(&[Variant::Ours, Variant::NoU, Variant::NoM]);
        assert!(std::ptr::eq(e[0].params.unwrap(), e[1].params.unwrap()));
        assert!(e[2].params.is_none());
        assert_eq!(e[1].label, "no_U");
    }
}
