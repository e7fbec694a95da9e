use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectra_core::corpus::build_samples;
use spectra_core::model::Spectra;
use spectra_core::objectives::{make_crs_sample, CrsLabel, TurnPool};
use spectra_core::speech::SpanMaskConfig;
use spectra_core::text::Vocab;
use spectra_core::train::{sample_objective, ObjectiveConfig};
use spectra_numerics::{grad_check, GradCheckConfig, Graph, ParamStore};

use super::support;

#[derive(Clone, Copy, Debug)]
pub enum Term {
    Tpp,
    Crs,
    Cmlm,
    Cmam,
    Joint,
}

fn objective(term: Term) -> ObjectiveConfig {
    let mut cfg = ObjectiveConfig::default();
    cfg.text_mask.prob = 0.3;
    cfg.speech_mask = Some(SpanMaskConfig::spectra());
    let only = |cfg: &mut ObjectiveConfig, tpp: bool, crs: bool, cmlm: bool, cmam: bool| {
        cfg.weights.alpha = if tpp { 1.0 } else { 0.0 };
        cfg.crs.enabled = crs;
        if !cmlm {
            cfg.text_mask.prob = 0.0;
        }
        if !cmam {
            cfg.speech_mask = None;
        }
    };
    match term {
        Term::Tpp => only(&mut cfg, true, false, false, false),
        Term::Crs => only(&mut cfg, false, true, false, false),
        Term::Cmlm => only(&mut cfg, false, false, true, false),
        Term::Cmam => only(&mut cfg, false, false, false, true),
        Term::Joint => cfg.weights.alpha = 0.7,
    }
    cfg
}

/// Worst relative error over all parameters except attention key biases,
/// whose gradient is identically zero (softmax ignores a per-row shift);
/// for those the absolute error is returned separately.
pub fn check(term: Term, d_h: usize, layers: usize, seed: u64) -> (f64, f64) {
    let dialogs = support::dialogs(4, seed);
    let vocab = Vocab::from_dialogs(&dialogs);
    let (model, mut store) = Spectra::new(support::tiny_model(d_h, layers), vocab.len(), seed).expect("model");
    // a generic point: zero biases leave masked spans as zero rows where
    // layer norms amplify MAE kinks past any finite-difference step
    let mut jit = ChaCha8Rng::seed_from_u64(seed ^ 0x7177);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += jit.random_range(-0.1..0.1);
        }
    }
    let pool = TurnPool::new(&dialogs).expect("pool");
    let base = &build_samples(&dialogs[0], 2).expect("samples")[1];
    let (sample, label) = match term {
        Term::Tpp | Term::Cmlm => (base.clone(), CrsLabel::Positive),
        _ => make_crs_sample(base, &pool, &mut ChaCha8Rng::seed_from_u64(seed), &[0.4, 0.2, 0.4, 0.0]).expect("crs"),
    };
    let cfg = objective(term);
    let stream = seed + 1000;
    let mut g = Graph::new();
    let first = sample_objective(
        &model,
        &mut g,
        &store,
        &vocab,
        &sample,
        label,
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(stream),
        None,
    )
    .expect("objective");
    let fixed = first.cmam_targets.clone();
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let obj = sample_objective(
            &model,
            g,
            s,
            &vocab,
            &sample,
            label,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(stream),
            fixed.as_ref(),
        )
        .expect("objective");
        Ok(obj.joint)
    };
    let gc = GradCheckConfig {
        coords_per_param: 12,
        ..Default::default()
    };
    let report = grad_check(&mut store, loss, gc).expect("grad check");
    let mut rel = 0.0f64;
    let mut key_bias_abs = 0.0f64;
    for p in &report.per_param {
        if p.name.ends_with("/attn/k/b") {
            key_bias_abs = key_bias_abs.max(p.max_abs_error);
        } else {
            rel = rel.max(p.max_relative_error);
        }
    }
    (rel, key_bias_abs)
}
