use spectra_numerics::{Float, Graph, ParamId, ParamStore, Var};

use super::TokenizedInput;
use crate::error::{Result, SpectraError};
use crate::nn::Init;

/// Token, absolute position and segment tables; a token's input vector is
/// the sum of its three rows.
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub max_len: usize,
}

impl TextEmbedding {
    pub fn new(init: &mut Init<'_>, vocab_size: usize, max_len: usize, d_h: usize) -> Self {
        TextEmbedding {
            token: init.normal("text/emb/token", &[vocab_size, d_h], 0.1),
            position: init.normal("text/emb/position", &[max_len, d_h], 0.02),
            segment: init.normal("text/emb/segment", &[2, d_h], 0.02),
            max_len,
        }
    }

    /// Embeds `token_ids` (which may differ from `input.token_ids` when
    /// masking has been applied) with the input's positions and segments.
    pub fn embed<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: &TokenizedInput,
        token_ids: &[usize],
    ) -> Result<Var> {
        self.embed_ids(g, store, token_ids, &input.position_ids, &input.segment_ids)
    }

    pub fn embed_ids<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        token_ids: &[usize],
        position_ids: &[usize],
        segment_ids: &[usize],
    ) -> Result<Var> {
        let n = token_ids.len();
        if n > self.max_len {
            return Err(SpectraError::TextTooLong { len: n, max: self.max_len });
        }
        if position_ids.len() != n || segment_ids.len() != n {
            return Err(SpectraError::Invalid(format!(
                "embedding inputs disagree in length: {n} tokens, {} positions, {} segments",
                position_ids.len(),
                segment_ids.len()
            )));
        }
        let (tok, pos, seg) = (
            g.param(store, self.token),
            g.param(store, self.position),
            g.param(store, self.segment),
        );
        let t = g.gather_rows(tok, token_ids)?;
        let p = g.gather_rows(pos, position_ids)?;
        let s = g.gather_rows(seg, segment_ids)?;
        let tp = g.add(t, p)?;
        Ok(g.add(tp, s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use spectra_numerics::Tensor;

    fn setup() -> (TextEmbedding, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let emb = TextEmbedding::new(&mut Init::new(&mut store, 1), 10, 16, 4);
        (emb, store)
    }

    #[test]
    fn zero_tables_give_zero_output() {
        let (emb, mut store) = setup();
        for id in [emb.token, emb.position, emb.segment] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let out = emb.embed_ids(&mut g, &store, &[4, 5, 6], &[0, 1, 2], &[0, 0, 1]).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_sum_three_tables() {
        let (emb, store) = setup();
        let mut g = Graph::new();
        let out = emb.embed_ids(&mut g, &store, &[7, 7], &[3, 3], &[0, 1]).unwrap();
        let seg = store.value(emb.segment);
        let v = g.value(out);
        for j in 0..4 {
            let diff = v.row(1)[j] - v.row(0)[j];
            assert!((diff - (seg.row(1)[j] - seg.row(0)[j])).abs() < 1e-15);
            let want = store.value(emb.token).row(7)[j] + store.value(emb.position).row(3)[j] + seg.row(0)[j];
            assert!((v.row(0)[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn swapping_tokens_keeps_position_contribution() {
        let (emb, store) = setup();
        let mut g = Graph::new();
        let a = emb.embed_ids(&mut g, &store, &[4, 8], &[0, 1], &[0, 0]).unwrap();
        let b = emb.embed_ids(&mut g, &store, &[8, 4], &[0, 1], &[0, 0]).unwrap();
        let tok = store.value(emb.token);
        for j in 0..4 {
            let d0 = g.value(b).row(0)[j] - g.value(a).row(0)[j];
            assert!((d0 - (tok.row(8)[j] - tok.row(4)[j])).abs() < 1e-15);
            let d1 = g.value(b).row(1)[j] - g.value(a).row(1)[j];
            assert!((d1 - (tok.row(4)[j] - tok.row(8)[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn over_length_is_rejected() {
        let (emb, store) = setup();
        let mut g = Graph::new();
        let ids = vec![4; 17];
        let pos: Vec<usize> = (0..17).collect();
        assert!(matches!(
            emb.embed_ids(&mut g, &store, &ids, &pos, &[0; 17]),
            Err(SpectraError::TextTooLong { len: 17, max: 16 })
        ));
    }
}
