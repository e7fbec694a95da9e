//! Transformer encoders for text and speech and the single-layer fusion
//! module that joins them.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spectra_numerics::{Float, Graph, Padding, ParamId, ParamStore, Tensor, Var, MASKED};

use crate::error::{Result, SpectraError};
use crate::nn::{Init, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_h: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Kernel and groups of the speech encoder's convolutional position
    /// embedding.
    pub conv_pos_kernel: usize,
    pub conv_pos_groups: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            num_layers: 2,
            d_h: 64,
            num_heads: 4,
            ffn_dim: 128,
            dropout: 0.0,
            conv_pos_kernel: 64,
            conv_pos_groups: 16,
        }
    }

    pub fn paper_scale() -> Self {
        EncoderConfig {
            num_layers: 12,
            d_h: 768,
            num_heads: 12,
            ffn_dim: 3072,
            dropout: 0.1,
            conv_pos_kernel: 128,
            conv_pos_groups: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpectraError::Config(m));
        if self.d_h == 0 || self.num_heads == 0 || !self.d_h.is_multiple_of(self.num_heads) {
            return bad(format!("d_h {} must be a positive multiple of num_heads {}", self.d_h, self.num_heads));
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.conv_pos_kernel == 0 || self.conv_pos_groups == 0 || !self.d_h.is_multiple_of(self.conv_pos_groups) {
            return bad(format!(
                "conv position kernel {} / groups {} do not fit d_h {}",
                self.conv_pos_kernel, self.conv_pos_groups, self.d_h
            ));
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Additive attention mask excluding invalid key positions, the same for
/// every query row.
pub fn key_padding_mask<T: Float>(key_valid: &[bool]) -> Option<Tensor<T>> {
    if key_valid.iter().all(|&v| v) {
        return None;
    }
    let l = key_valid.len();
    Some(Tensor::from_fn(&[l, l], |k| if key_valid[k % l] { T::zero() } else { T::of(MASKED) }))
}

/// Inverted dropout; identity when `rng` is `None` or `p` is 0.
pub fn dropout<T: Float>(g: &mut Graph<T>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask = Tensor::from_fn(g.shape(x), |_| if rng.random::<f64>() < p { T::zero() } else { keep });
    let mask = g.constant(mask)?;
    Ok(g.mul(x, mask)?)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, d_h: usize, num_heads: usize) -> Self {
        MultiHeadAttention {
            query: init.linear(&format!("{name}/q"), d_h, d_h, true),
            key: init.linear(&format!("{name}/k"), d_h, d_h, true),
            value: init.linear(&format!("{name}/v"), d_h, d_h, true),
            output: init.linear(&format!("{name}/o"), d_h, d_h, true),
            num_heads,
        }
    }

    /// Self-attention over the rows of `x`. Returns the output and the
    /// per-head attention weight nodes.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var, Vec<Var>)> {
        let d = g.shape(x)[1];
        let dk = d / self.num_heads;
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut weights = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let a = g.softmax(scores, mask)?;
            heads.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        Ok((self.output.forward(g, store, cat)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}

/// Pre-norm transformer layer: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn: Option<(LayerNorm, FeedForward)>,
    pub dropout: f64,
}

impl TransformerLayer {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &EncoderConfig, with_ffn: bool) -> Self {
        let ffn = with_ffn.then(|| {
            (
                init.layer_norm(&format!("{name}/ffn_norm"), cfg.d_h),
                FeedForward {
                    up: init.linear(&format!("{name}/ffn/up"), cfg.d_h, cfg.ffn_dim, true),
                    down: init.linear(&format!("{name}/ffn/down"), cfg.ffn_dim, cfg.d_h, true),
                },
            )
        });
        TransformerLayer {
            attn_norm: init.layer_norm(&format!("{name}/attn_norm"), cfg.d_h),
            attn: MultiHeadAttention::new(init, &format!("{name}/attn"), cfg.d_h, cfg.num_heads),
            ffn,
            dropout: cfg.dropout,
        }
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: Option<&Tensor<T>>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<Var>)> {
        let h = self.attn_norm.forward(g, store, x)?;
        let (a, weights) = self.attn.forward(g, store, h, mask)?;
        let a = dropout(g, a, self.dropout, rng.as_deref_mut())?;
        let mut x = g.add(x, a)?;
        if let Some((norm, ffn)) = &self.ffn {
            let h = norm.forward(g, store, x)?;
            let f = ffn.forward(g, store, h)?;
            let f = dropout(g, f, self.dropout, rng)?;
            x = g.add(x, f)?;
        }
        Ok((x, weights))
    }
}

/// A stack of pre-norm layers followed by a final layer norm. With zero
/// layers the stack is the identity.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
    pub final_norm: Option<LayerNorm>,
}

impl TransformerStack {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &EncoderConfig) -> Self {
        let layers = (0..cfg.num_layers)
            .map(|i| TransformerLayer::new(init, &format!("{name}/layer{i}"), cfg, true))
            .collect();
        let final_norm = (cfg.num_layers > 0).then(|| init.layer_norm(&format!("{name}/final_norm"), cfg.d_h));
        TransformerStack { layers, final_norm }
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        key_valid: &[bool],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        check_valid(g, x, key_valid)?;
        let mask = key_padding_mask::<T>(key_valid);
        let mut x = x;
        for layer in &self.layers {
            x = layer.forward(g, store, x, mask.as_ref(), rng.as_deref_mut())?.0;
        }
        match &self.final_norm {
            Some(n) => n.forward(g, store, x),
            None => Ok(x),
        }
    }
}

fn check_valid<T: Float>(g: &Graph<T>, x: Var, key_valid: &[bool]) -> Result<()> {
    let len = g.shape(x)[0];
    if key_valid.len() != len || !key_valid.iter().any(|&v| v) {
        return Err(SpectraError::Invalid(format!(
            "validity mask of length {} for a sequence of {len} rows (needs at least one valid row)",
            key_valid.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub stack: TransformerStack,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &EncoderConfig, max_len: usize) -> Self {
        TextEncoder {
            stack: TransformerStack::new(init, "text/encoder", cfg),
            max_len,
        }
    }

    /// `n × d_h` text hidden states from `n × d_h` embeddings.
    pub fn encode_text<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        key_valid: &[bool],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let n = g.shape(x)[0];
        if n > self.max_len {
            return Err(SpectraError::TextTooLong { len: n, max: self.max_len });
        }
        self.stack.forward(g, store, x, key_valid, rng)
    }
}

/// Grouped convolution over the sequence with "same" padding, GELU, and a
/// residual add.
#[derive(Clone, Debug)]
pub struct ConvPositionEmbedding {
    pub weight: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl ConvPositionEmbedding {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &EncoderConfig) -> Self {
        let cin = cfg.d_h / cfg.conv_pos_groups;
        let std = (1.0 / (cin * cfg.conv_pos_kernel) as f64).sqrt();
        ConvPositionEmbedding {
            weight: init.normal(&format!("{name}/w"), &[cfg.d_h, cin, cfg.conv_pos_kernel], std),
            bias: init.zeros(&format!("{name}/b"), &[cfg.d_h]),
            groups: cfg.conv_pos_groups,
        }
    }

    /// `x + GELU(conv(x))`. Invalid rows are zeroed before the convolution
    /// so appended padding does not leak into real positions.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, key_valid: &[bool]) -> Result<Var> {
        let input = if key_valid.iter().all(|&v| v) {
            x
        } else {
            let d = g.shape(x)[1];
            let keep = Tensor::from_fn(&[key_valid.len(), d], |k| if key_valid[k / d] { T::one() } else { T::zero() });
            let keep = g.constant(keep)?;
            g.mul(x, keep)?
        };
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let c = g.conv1d(input, w, Some(b), 1, self.groups, Padding::Same)?;
        let c = g.gelu(c)?;
        Ok(g.add(x, c)?)
    }
}

#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub pos_conv: ConvPositionEmbedding,
    pub stack: TransformerStack,
}

impl SpeechEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &EncoderConfig) -> Self {
        SpeechEncoder {
            pos_conv: ConvPositionEmbedding::new(init, "speech/encoder/pos_conv", cfg),
            stack: TransformerStack::new(init, "speech/encoder", cfg),
        }
    }

    /// Hidden states of an assembled `(m_prev + m_cur + 2) × d_h` speech
    /// sequence.
    pub fn encode_speech<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        a: Var,
        key_valid: &[bool],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        check_valid(g, a, key_valid)?;
        let x = self.pos_conv.forward(g, store, a, key_valid)?;
        self.stack.forward(g, store, x, key_valid, rng)
    }
}

/// Modality embeddings plus one transformer layer over text followed by
/// speech.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub modality: ParamId,
    pub layer: TransformerLayer,
    pub final_norm: LayerNorm,
}

impl Fusion {
    pub fn new(init: &mut Init<'_>, cfg: &EncoderConfig, with_ffn: bool) -> Self {
        Fusion {
            modality: init.normal("fusion/modality", &[2, cfg.d_h], 0.02),
            layer: TransformerLayer::new(init, "fusion/layer", cfg, with_ffn),
            final_norm: init.layer_norm("fusion/final_norm", cfg.d_h),
        }
    }

    /// Concatenated, modality-tagged input of the fusion layer.
    pub fn fusion_input<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h_text: Var, h_speech: Var) -> Result<Var> {
        let n = g.shape(h_text)[0];
        let m = g.shape(h_speech)[0];
        let cat = g.concat_rows(&[h_text, h_speech])?;
        let table = g.param(store, self.modality);
        let ids: Vec<usize> = (0..n + m).map(|i| usize::from(i >= n)).collect();
        let e = g.gather_rows(table, &ids)?;
        Ok(g.add(cat, e)?)
    }

    /// Fuses text states (`n` rows) with speech states whose layout is
    /// `[CLS] prev [SEP] cur`.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h_text: Var,
        h_speech: Var,
        speech_lens: (usize, usize),
        key_valid: &[bool],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FusedRepresentation> {
        let n = g.shape(h_text)[0];
        let m = g.shape(h_speech)[0];
        if m != speech_lens.0 + speech_lens.1 + 2 {
            return Err(SpectraError::Invalid(format!(
                "speech states have {m} rows but turn lengths {speech_lens:?} imply {}",
                speech_lens.0 + speech_lens.1 + 2
            )));
        }
        let x = self.fusion_input(g, store, h_text, h_speech)?;
        check_valid(g, x, key_valid)?;
        let mask = key_padding_mask::<T>(key_valid);
        let (h, attention) = self.layer.forward(g, store, x, mask.as_ref(), rng)?;
        let hidden = self.final_norm.forward(g, store, h)?;
        Ok(FusedRepresentation {
            hidden,
            text_len: n,
            speech_prev_len: speech_lens.0,
            speech_cur_len: speech_lens.1,
            key_valid: key_valid.to_vec(),
            attention,
        })
    }
}

/// Output of the fusion module with its index map: text occupies rows
/// `[0, n)` and speech rows `[n, len)`.
#[derive(Clone, Debug)]
pub struct FusedRepresentation {
    pub hidden: Var,
    pub text_len: usize,
    pub speech_prev_len: usize,
    pub speech_cur_len: usize,
    pub key_valid: Vec<bool>,
    /// Per-head attention weights of the fusion layer.
    pub attention: Vec<Var>,
}

impl FusedRepresentation {
    pub fn len(&self) -> usize {
        self.text_len + self.speech_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn speech_len(&self) -> usize {
        self.speech_prev_len + self.speech_cur_len + 2
    }

    pub fn text_span(&self) -> std::ops::Range<usize> {
        0..self.text_len
    }

    pub fn speech_span(&self) -> std::ops::Range<usize> {
        self.text_len..self.len()
    }

    pub fn prev_frame(&self, j: usize) -> usize {
        self.text_len + 1 + j
    }

    pub fn cur_frame(&self, j: usize) -> usize {
        self.text_len + self.speech_prev_len + 2 + j
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMetadata {
    pub len: usize,
    pub num_heads: usize,
    pub text_span: (usize, usize),
    pub speech_span: (usize, usize),
    pub speech_prev_len: usize,
    pub speech_cur_len: usize,
    /// Head-averaged attention mass from text rows to speech columns,
    /// averaged over text rows.
    pub cross_modal_mass: f64,
    pub files: Vec<String>,
}

/// Head-averaged attention matrix of the fusion layer.
pub fn mean_attention<T: Float>(g: &Graph<T>, fused: &FusedRepresentation) -> Result<Vec<Vec<f64>>> {
    if fused.attention.is_empty() {
        return Err(SpectraError::Invalid("attention was not captured for this forward pass".into()));
    }
    let l = fused.len();
    let mut mean = vec![vec![0.0; l]; l];
    let h = fused.attention.len() as f64;
    for &a in &fused.attention {
        let v = g.value(a);
        for (i, row) in mean.iter_mut().enumerate() {
            for (j, m) in row.iter_mut().enumerate() {
                *m += v.data()[i * l + j].to_f64_lossy() / h;
            }
        }
    }
    Ok(mean)
}

fn write_csv(path: &Path, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.8}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(SpectraError::io(path))
}

/// Writes `head{h}.csv` per head, `mean.csv` and `attention.json` into `dir`.
pub fn export_attention<T: Float>(g: &Graph<T>, fused: &FusedRepresentation, dir: &Path) -> Result<AttentionMetadata> {
    let mean = mean_attention(g, fused)?;
    fs::create_dir_all(dir).map_err(SpectraError::io(dir))?;
    let l = fused.len();
    let mut files = Vec::new();
    for (h, &a) in fused.attention.iter().enumerate() {
        let name = format!("head{h}.csv");
        let v = g.value(a).to_f64_vec();
        write_csv(&dir.join(&name), v.chunks(l).map(<[f64]>::to_vec))?;
        files.push(name);
    }
    write_csv(&dir.join("mean.csv"), mean.iter().cloned())?;
    files.push("mean.csv".into());
    let n = fused.text_len;
    let cross = mean[..n].iter().map(|row| row[n..].iter().sum::<f64>()).sum::<f64>() / n.max(1) as f64;
    let meta = AttentionMetadata {
        len: l,
        num_heads: fused.attention.len(),
        text_span: (0, n),
        speech_span: (n, l),
        speech_prev_len: fused.speech_prev_len,
        speech_cur_len: fused.speech_cur_len,
        cross_modal_mass: cross,
        files,
    };
    let path = dir.join("attention.json");
    let json = serde_json::to_vec_pretty(&meta).map_err(SpectraError::json(&path))?;
    fs::write(&path, json).map_err(SpectraError::io(&path))?;
    Ok(meta)
}
