use serde::{Deserialize, Serialize};
use spectra_numerics::{Float, Graph, Padding, ParamId, ParamStore, Tensor, Var};

use crate::error::{Result, SpectraError};
use crate::nn::{Init, LayerNorm, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Shape of the convolutional feature extractor. Every layer is a valid
/// (unpadded) convolution followed by GELU; a layer normalization closes
/// the stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub conv_layers: Vec<ConvLayerSpec>,
}

impl FrontendConfig {
    /// The 16 kHz, eight-layer stack: the seven standard wav2vec-family
    /// layers plus a 5/5 layer that halves the frame rate to 10 Hz.
    pub fn paper_scale() -> Self {
        let l = |kernel, stride| ConvLayerSpec {
            channels: 512,
            kernel,
            stride,
        };
        FrontendConfig {
            sample_rate: 16_000,
            conv_layers: vec![l(10, 5), l(3, 2), l(3, 2), l(3, 2), l(3, 2), l(2, 2), l(2, 2), l(5, 5)],
        }
    }

    /// Two layers over a 100 Hz synthetic waveform: 10-sample windows with a
    /// 10-sample stride.
    pub fn desk() -> Self {
        FrontendConfig {
            sample_rate: 100,
            conv_layers: vec![
                ConvLayerSpec {
                    channels: 32,
                    kernel: 5,
                    stride: 5,
                },
                ConvLayerSpec {
                    channels: 32,
                    kernel: 2,
                    stride: 2,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(SpectraError::Config("front end needs at least one conv layer".into()));
        }
        if self.conv_layers.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
            return Err(SpectraError::Config("conv layers need positive channels, kernel and stride".into()));
        }
        if self.sample_rate == 0 {
            return Err(SpectraError::Config("sample_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.conv_layers.last().map_or(0, |l| l.channels)
    }

    pub fn total_stride(&self) -> usize {
        self.conv_layers.iter().map(|l| l.stride).product()
    }

    /// Input samples seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for l in &self.conv_layers {
            rf += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        rf
    }

    pub fn frame_stride_seconds(&self) -> f64 {
        self.total_stride() as f64 / f64::from(self.sample_rate)
    }

    pub fn frame_window_seconds(&self) -> f64 {
        self.receptive_field() as f64 / f64::from(self.sample_rate)
    }

    /// Closed form for the stacked valid convolutions:
    /// `1 + (len − receptive_field) / total_stride`.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        let rf = self.receptive_field();
        (len >= rf).then(|| 1 + (len - rf) / self.total_stride())
    }
}

/// Learned convolution weights of the extractor.
#[derive(Clone, Debug)]
pub struct SpeechFrontend {
    pub config: FrontendConfig,
    pub convs: Vec<ParamId>,
    pub norm: LayerNorm,
}

impl SpeechFrontend {
    pub fn new(init: &mut Init<'_>, config: FrontendConfig) -> Self {
        let mut c_in = 1;
        let mut convs = Vec::with_capacity(config.conv_layers.len());
        for (i, l) in config.conv_layers.iter().enumerate() {
            let std = (2.0 / (c_in * l.kernel) as f64).sqrt();
            convs.push(init.normal(&format!("speech/extractor/conv{i}"), &[l.channels, c_in, l.kernel], std));
            c_in = l.channels;
        }
        let norm = init.layer_norm("speech/extractor/norm", config.feature_dim());
        SpeechFrontend { config, convs, norm }
    }

    /// `m × feature_dim` frame features of a mono waveform, with
    /// `m = config.num_frames(len)`.
    pub fn extract_features<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, waveform: &[f32]) -> Result<Var> {
        let min = self.config.receptive_field();
        if waveform.len() < min {
            return Err(SpectraError::WaveformTooShort {
                len: waveform.len(),
                min,
            });
        }
        let input = Tensor::new(vec![waveform.len(), 1], waveform.iter().map(|&v| T::of(f64::from(v))).collect())?;
        let mut x = g.constant(input)?;
        for (spec, &w) in self.config.conv_layers.iter().zip(&self.convs) {
            let w = g.param(store, w);
            let y = g.conv1d(x, w, None, spec.stride, 1, Padding::Valid)?;
            x = g.gelu(y)?;
        }
        self.norm.forward(g, store, x)
    }
}

/// Layer normalization and a fully connected map from the extractor's
/// feature size to the model width.
#[derive(Clone, Debug)]
pub struct FeatureProjection {
    pub norm: LayerNorm,
    pub linear: Linear,
}

impl FeatureProjection {
    pub fn new(init: &mut Init<'_>, feature_dim: usize, d_h: usize) -> Self {
        FeatureProjection {
            norm: init.layer_norm("speech/projection/norm", feature_dim),
            linear: init.linear("speech/projection/linear", feature_dim, d_h, true),
        }
    }

    pub fn project_features<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let normed = self.norm.forward(g, store, features)?;
        self.linear.forward(g, store, normed)
    }
}

/// `[CLS] f_{i−1} [SEP] f_i` as one `(m_prev + m_cur + 2) × d_h` sequence.
#[derive(Clone, Copy, Debug)]
pub struct SpeechSequence {
    pub features: Var,
    pub len_prev: usize,
    pub len_cur: usize,
}

impl SpeechSequence {
    pub fn len(&self) -> usize {
        self.len_prev + self.len_cur + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cls_index(&self) -> usize {
        0
    }

    pub fn sep_index(&self) -> usize {
        self.len_prev + 1
    }

    /// Sequence index of frame `j` of the previous turn.
    pub fn prev_frame(&self, j: usize) -> usize {
        1 + j
    }

    /// Sequence index of frame `j` of the current turn.
    pub fn cur_frame(&self, j: usize) -> usize {
        self.len_prev + 2 + j
    }
}

/// Concatenates the learned `[CLS]` and `[SEP]` vectors (each `1 × d_h`)
/// with the two projected turns.
pub fn assemble_speech_sequence<T: Float>(
    g: &mut Graph<T>,
    f_prev: Var,
    f_cur: Var,
    cls: Var,
    sep: Var,
) -> Result<SpeechSequence> {
    let (len_prev, len_cur) = (g.shape(f_prev)[0], g.shape(f_cur)[0]);
    if len_prev == 0 || len_cur == 0 {
        return Err(SpectraError::Invalid(format!(
            "speech turns must be non-empty (got {len_prev} and {len_cur} frames)"
        )));
    }
    let features = g.concat_rows(&[cls, f_prev, sep, f_cur])?;
    Ok(SpeechSequence {
        features,
        len_prev,
        len_cur,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Output length by applying each layer's valid-convolution length in
    /// turn.
    fn stepwise(cfg: &FrontendConfig, len: usize) -> Option<usize> {
        let mut l = len;
        for layer in &cfg.conv_layers {
            if l < layer.kernel {
                return None;
            }
            l = (l - layer.kernel) / layer.stride + 1;
        }
        Some(l)
    }

    #[test]
    fn paper_scale_gives_99_frames_for_ten_seconds() {
        let cfg = FrontendConfig::paper_scale();
        assert_eq!(cfg.num_frames(160_000), Some(99));
        assert_eq!(stepwise(&cfg, 160_000), Some(99));
        assert_eq!(cfg.total_stride(), 1600);
        assert!((cfg.frame_stride_seconds() - 0.1).abs() < 1e-12);
        // 400-sample base window plus four extra hops of 320 samples
        assert_eq!(cfg.receptive_field(), 1680);
        assert!((cfg.frame_window_seconds() - 0.105).abs() < 1e-12);
    }

    #[test]
    fn desk_config_three_seconds() {
        let cfg = FrontendConfig::desk();
        // 300 -> (300-5)/5+1 = 60 -> (60-2)/2+1 = 30
        assert_eq!(stepwise(&cfg, 300), Some(30));
        assert_eq!(cfg.num_frames(300), Some(30));
        assert_eq!(cfg.total_stride(), 10);
        assert_eq!(cfg.receptive_field(), 10);
    }

    #[test]
    fn closed_form_matches_stepwise_for_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let layers = (0..rng.random_range(1..5))
                .map(|_| ConvLayerSpec {
                    channels: 1,
                    kernel: rng.random_range(1..8),
                    stride: rng.random_range(1..5),
                })
                .collect();
            let cfg = FrontendConfig {
                sample_rate: 100,
                conv_layers: layers,
            };
            let len = rng.random_range(1..400);
            assert_eq!(cfg.num_frames(len), stepwise(&cfg, len), "{cfg:?} len {len}");
        }
    }

    #[test]
    fn extractor_output_shape_and_short_input() {
        let mut store = ParamStore::new();
        let fe = SpeechFrontend::new(&mut Init::new(&mut store, 0), FrontendConfig::desk());
        let mut g = Graph::<f64>::new();
        let wave: Vec<f32> = (0..300).map(|i| (i as f32 * 0.3).sin()).collect();
        let f = fe.extract_features(&mut g, &store, &wave).unwrap();
        assert_eq!(g.shape(f), &[30, 32]);
        assert!(matches!(
            fe.extract_features(&mut g, &store, &wave[..9]),
            Err(SpectraError::WaveformTooShort { len: 9, min: 10 })
        ));
    }

    #[test]
    fn zero_projection_weights_give_bias() {
        let mut store = ParamStore::new();
        let proj = FeatureProjection::new(&mut Init::new(&mut store, 0), 6, 4);
        store.set_value(proj.linear.w, Tensor::zeros(&[6, 4])).unwrap();
        let bias = Tensor::from_f64(&[4], &[0.5, -1.0, 2.0, 0.25]).unwrap();
        store.set_value(proj.linear.b.unwrap(), bias.clone()).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[3, 6], |i| i as f64)).unwrap();
        let y = proj.project_features(&mut g, &store, x).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(y).row(r), bias.data());
        }
    }

    #[test]
    fn constant_row_projects_to_shift_mapped() {
        // layer norm of a constant row is its shift; with default (zero)
        // shift the projection reduces to the bias
        let mut store = ParamStore::new();
        let proj = FeatureProjection::new(&mut Init::new(&mut store, 0), 6, 4);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 6], 3.0)).unwrap();
        let y = proj.project_features(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_matches_direct_recomputation() {
        let mut store = ParamStore::new();
        let proj = FeatureProjection::new(&mut Init::new(&mut store, 5), 12, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[4, 12], |_| rng.random_range(-2.0..2.0));
        let mut g = Graph::<f64>::new();
        let vx = g.constant(x.clone()).unwrap();
        let y = proj.project_features(&mut g, &store, vx).unwrap();
        let (w, b) = (store.value(proj.linear.w), store.value(proj.linear.b.unwrap()));
        let (gamma, beta) = (store.value(proj.norm.gamma), store.value(proj.norm.beta));
        for r in 0..4 {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / 12.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            let normed: Vec<f64> = (0..12)
                .map(|j| (row[j] - mean) / (var + 1e-5).sqrt() * gamma.data()[j] + beta.data()[j])
                .collect();
            for o in 0..8 {
                let want: f64 = b.data()[o] + (0..12).map(|j| normed[j] * w.data()[j * 8 + o]).sum::<f64>();
                assert!((g.value(y).row(r)[o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assembly_layout() {
        let mut g = Graph::<f64>::new();
        let prev = g.constant(Tensor::from_fn(&[5, 3], |i| i as f64)).unwrap();
        let cur = g.constant(Tensor::from_fn(&[7, 3], |i| 100.0 + i as f64)).unwrap();
        let cls = g.constant(Tensor::full(&[1, 3], -1.0)).unwrap();
        let sep = g.constant(Tensor::full(&[1, 3], -2.0)).unwrap();
        let seq = assemble_speech_sequence(&mut g, prev, cur, cls, sep).unwrap();
        assert_eq!(seq.len(), 14);
        assert_eq!(g.shape(seq.features), &[14, 3]);
        let v = g.value(seq.features).clone();
        for j in 0..5 {
            assert_eq!(v.row(seq.prev_frame(j)), g.value(prev).row(j));
        }
        for j in 0..7 {
            assert_eq!(v.row(seq.cur_frame(j)), g.value(cur).row(j));
        }
        assert_eq!(v.row(seq.sep_index()), &[-2.0; 3]);
        assert_eq!(v.row(0), &[-1.0; 3]);

        let empty = g.constant(Tensor::zeros(&[0, 3])).unwrap();
        assert!(assemble_speech_sequence(&mut g, empty, cur, cls, sep).is_err());
    }
}
