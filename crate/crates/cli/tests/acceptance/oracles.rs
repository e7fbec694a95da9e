use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectra_core::corpus::build_samples;
use spectra_core::model::Spectra;
use spectra_core::nn::Linear;
use spectra_core::objectives::{make_crs_sample, CrsLabel, TurnPool};
use spectra_core::speech::SpanMaskConfig;
use spectra_core::text::Vocab;
use spectra_core::train::{sample_objective, ObjectiveConfig};
use spectra_numerics::{Graph, ParamStore};

use super::support;

fn affine(store: &ParamStore<f64>, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(lin.w);
    let d_out = w.shape()[1];
    (0..d_out)
        .map(|o| {
            let mut acc = 0.0;
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.data()[i * d_out + o];
            }
            acc + lin.b.map_or(0.0, |b| store.value(b).data()[o])
        })
        .collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() - logits[label]
}

fn note(out: &mut [(f64, usize); 5], i: usize, got: f64, want: f64) {
    out[i].0 = out[i].0.max((got - want).abs() / want.abs().max(1.0));
    out[i].1 += 1;
}

/// Largest relative deviation of each loss (TPP, CRS, CMLM, CMAM, joint)
/// from its loop-based recomputation, with the number of cases checked.
/// Cases are drawn until every loss has been checked `min_cases` times.
pub fn run(min_cases: usize) -> [(f64, usize); 5] {
    let dialogs = support::dialogs(8, 31);
    let vocab = Vocab::from_dialogs(&dialogs);
    let (model, store) = Spectra::new(support::tiny_model(8, 1), vocab.len(), 9).expect("model");
    let pool = TurnPool::new(&dialogs).expect("pool");
    let samples: Vec<_> = dialogs.iter().flat_map(|d| build_samples(d, 4).expect("samples")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut out = [(0.0f64, 0usize); 5];
    for c in 0..min_cases * 20 {
        let (sample, label) = make_crs_sample(&samples[c % samples.len()], &pool, &mut rng, &[0.25; 4]).expect("crs");
        let alpha = rng.random_range(0.1..2.0);
        let mut cfg = ObjectiveConfig {
            speech_mask: Some(SpanMaskConfig::spectra()),
            ..Default::default()
        };
        cfg.weights.alpha = alpha;
        cfg.text_mask.prob = 0.3;
        let mut g = Graph::new();
        let obj = sample_objective(&model, &mut g, &store, &vocab, &sample, label, &cfg, &mut rng, None).expect("objective");
        let hidden = g.value(obj.forward.fused.hidden);
        let n = obj.tokenized.token_ids.len();

        let words = &obj.tokenized.word_boundaries;
        let mut tpp = 0.0;
        if !words.is_empty() {
            let la = model.config.max_speech_seconds;
            let (mut se, mut ee) = (0.0, 0.0);
            for w in words {
                let ps = affine(&store, &model.heads.tpp.start, hidden.row(w.first_token))[0];
                let pe = affine(&store, &model.heads.tpp.end, hidden.row(w.last_token))[0];
                se += (ps - w.start_time / la).powi(2);
                ee += (pe - w.end_time / la).powi(2);
            }
            tpp = 0.5 * (se + ee) / words.len() as f64;
            note(&mut out, 0, obj.values.tpp.expect("tpp present"), tpp);
        }

        let crs = cross_entropy(&affine(&store, &model.heads.crs, hidden.row(0)), label as usize);
        note(&mut out, 1, obj.values.crs.expect("crs present"), crs);

        let plan = &obj.text_plan;
        let mut cmlm = 0.0;
        if !plan.positions.is_empty() {
            for (&p, &l) in plan.positions.iter().zip(&plan.labels) {
                cmlm += cross_entropy(&affine(&store, &model.heads.lm, hidden.row(p)), l);
            }
            cmlm /= plan.positions.len() as f64;
            note(&mut out, 2, obj.values.cmlm.expect("cmlm present"), cmlm);
        }

        let f = &obj.forward;
        let m_prev = f.mask_prev.actions.len();
        let (use_prev, use_cur) = match label {
            CrsLabel::Positive | CrsLabel::TextSubstituted => (true, true),
            CrsLabel::SpeechSubstituted => (true, false),
            CrsLabel::BothSubstituted => (false, false),
        };
        let (mut abs, mut count) = (0.0, 0usize);
        for (used, plan, feats, offset) in [
            (use_prev, &f.mask_prev, f.features_prev, n + 1),
            (use_cur, &f.mask_cur, f.features_cur, n + m_prev + 2),
        ] {
            if !used {
                continue;
            }
            let feats = g.value(feats);
            for (j, a) in plan.actions.iter().enumerate() {
                if a.is_masked() {
                    let pred = affine(&store, &model.heads.cmam, hidden.row(offset + j));
                    for (p, t) in pred.iter().zip(feats.row(j)) {
                        abs += (p - t).abs();
                        count += 1;
                    }
                }
            }
        }
        let cmam = if count > 0 { abs / count as f64 } else { 0.0 };
        if count > 0 {
            note(&mut out, 3, obj.values.cmam.expect("cmam present"), cmam);
        }

        note(&mut out, 4, obj.values.joint, alpha * tpp + crs + cmlm + cmam);
        if out.iter().all(|o| o.1 >= min_cases) {
            break;
        }
    }
    out
}
