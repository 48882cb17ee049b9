//! Small deterministic text encoder used as a frozen, differentiable stand-in
//! for a vision-language text tower.
//!
//! Architecture (row-vector convention, `y = x W`):
//!
//! ```text
//! h = E + positional
//! repeat 2x:  h = h + Attn(LN1(h))      single head, causal mask
//!             h = h + MLP(LN2(h))       tanh(x W1 + b1) W2 + b2
//! v_eot = LN_final(h)[eot_index] W_out
//! ```
//!
//! Only the input embedding matrix `E` receives gradients; the weights are
//! read-only after [`init_encoder`]. Because of the causal mask, `v_eot`
//! depends on rows `0..=eot_index` of `E` only, and the forward pass
//! evaluates just those rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::Rng;

pub const VOCAB_SIZE: usize = 40;
pub const CONTEXT_LENGTH: usize = 16;
pub const D_MODEL: usize = 32;
pub const HIDDEN: usize = 64;
pub const NUM_BLOCKS: usize = 2;
pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

pub const PAD: usize = 0;
pub const SOT: usize = 1;
pub const EOT: usize = 2;
const LETTER_BASE: usize = 3;
const SPACE: usize = 29;
const DIGIT_BASE: usize = 30;

fn char_id(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(LETTER_BASE + (c as usize - 'a' as usize)),
        ' ' => Some(SPACE),
        '0'..='9' => Some(DIGIT_BASE + (c as usize - '0' as usize)),
        _ => None,
    }
}

fn id_char(id: usize) -> Option<char> {
    match id {
        LETTER_BASE..=28 => Some((b'a' + (id - LETTER_BASE) as u8) as char),
        SPACE => Some(' '),
        DIGIT_BASE..=39 => Some((b'0' + (id - DIGIT_BASE) as u8) as char),
        _ => None,
    }
}

/// `[sot, chars.., eot, pad..]`, exactly [`CONTEXT_LENGTH`] ids.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let lowered = text.to_lowercase();
    let mut ids = Vec::with_capacity(CONTEXT_LENGTH);
    ids.push(SOT);
    for c in lowered.chars() {
        let id = char_id(c).ok_or_else(|| Error::Tokenize(format!("unmappable character {c:?}")))?;
        ids.push(id);
    }
    if ids.len() > CONTEXT_LENGTH - 1 {
        return Err(Error::Tokenize(format!(
            "text has {} characters; at most {} fit",
            ids.len() - 1,
            CONTEXT_LENGTH - 2
        )));
    }
    ids.push(EOT);
    ids.resize(CONTEXT_LENGTH, PAD);
    Ok(ids)
}

/// Text between the first `sot` and the following `eot` (or the end).
/// Special ids inside that span render as nothing.
pub fn detokenize(ids: &[usize]) -> Result<String> {
    if let Some(&bad) = ids.iter().find(|&&id| id >= VOCAB_SIZE) {
        return Err(Error::Tokenize(format!("token id {bad} is outside the vocabulary")));
    }
    let start = ids.iter().position(|&id| id == SOT).map_or(0, |p| p + 1);
    Ok(ids[start..]
        .iter()
        .take_while(|&&id| id != EOT)
        .filter_map(|&id| id_char(id))
        .collect())
}

/// Position of the first `eot` id.
pub fn eot_position(ids: &[usize]) -> Option<usize> {
    ids.iter().position(|&id| id == EOT)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2: LayerNorm,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    pub seed: u64,
    pub token_table: Matrix,
    pub positional: Matrix,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub w_out: Matrix,
}

/// Deterministic weights: every matrix N(0, 0.02^2), layer-norm gains 1,
/// all biases 0.
pub fn init_encoder(seed: u64) -> EncoderWeights {
    let mut rng = Rng::new(seed);
    let mut gaussian = |r: usize, c: usize| Matrix::from_vec(r, c, rng.normal_vec(r * c, INIT_STD));
    let token_table = gaussian(VOCAB_SIZE, D_MODEL);
    let positional = gaussian(CONTEXT_LENGTH, D_MODEL);
    let blocks = (0..NUM_BLOCKS)
        .map(|_| Block {
            ln1: LayerNorm::identity(D_MODEL),
            w_q: gaussian(D_MODEL, D_MODEL),
            w_k: gaussian(D_MODEL, D_MODEL),
            w_v: gaussian(D_MODEL, D_MODEL),
            w_o: gaussian(D_MODEL, D_MODEL),
            ln2: LayerNorm::identity(D_MODEL),
            w1: gaussian(D_MODEL, HIDDEN),
            b1: vec![0.0; HIDDEN],
            w2: gaussian(HIDDEN, D_MODEL),
            b2: vec![0.0; D_MODEL],
        })
        .collect();
    let w_out = gaussian(D_MODEL, D_MODEL);
    EncoderWeights {
        seed,
        token_table,
        positional,
        blocks,
        ln_final: LayerNorm::identity(D_MODEL),
        w_out,
    }
}

/// `E[i] = token_table[ids[i]]`.
pub fn embed_tokens(weights: &EncoderWeights, ids: &[usize]) -> Result<Matrix> {
    if ids.len() != CONTEXT_LENGTH {
        return Err(Error::Tokenize(format!(
            "expected {CONTEXT_LENGTH} token ids, got {}",
            ids.len()
        )));
    }
    let mut e = Matrix::zeros(CONTEXT_LENGTH, D_MODEL);
    for (i, &id) in ids.iter().enumerate() {
        if id >= VOCAB_SIZE {
            return Err(Error::Tokenize(format!("token id {id} is outside the vocabulary")));
        }
        e.row_mut(i).copy_from_slice(weights.token_table.row(id));
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EotVector {
    pub vector: Vec<f64>,
    pub eot_index: usize,
}

#[derive(Debug, Clone)]
struct LnCache {
    /// Normalized rows, before the gain and shift.
    xhat: Matrix,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Row i holds the attention weights of position i over positions 0..=i.
    probs: Matrix,
    ln2: LnCache,
    /// tanh activations.
    t: Matrix,
}

/// Intermediates of one forward pass, consumed by [`encode_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    eot_index: usize,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
}

impl ForwardCache {
    pub fn eot_index(&self) -> usize {
        self.eot_index
    }

    /// Final-layer rows after normalization, before the gain and shift.
    pub fn final_normalized(&self) -> &Matrix {
        &self.final_ln.xhat
    }

    /// `1 / sqrt(var + eps)` for each final-layer row.
    pub fn final_inv_std(&self) -> &[f64] {
        &self.final_ln.rstd
    }
}

fn ln_forward(x: &Matrix, ln: &LayerNorm) -> (Matrix, LnCache) {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[(i, j)] = h;
            out[(i, j)] = h * ln.gamma[j] + ln.beta[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn ln_backward(grad_out: &Matrix, cache: &LnCache, ln: &LayerNorm) -> Matrix {
    let (n, d) = (grad_out.rows(), grad_out.cols());
    let mut grad = Matrix::zeros(n, d);
    let mut g_hat = vec![0.0; d];
    for i in 0..n {
        let xhat = cache.xhat.row(i);
        for j in 0..d {
            g_hat[j] = grad_out[(i, j)] * ln.gamma[j];
        }
        let mean_g = g_hat.iter().sum::<f64>() / d as f64;
        let mean_gx = dot(&g_hat, xhat) / d as f64;
        for j in 0..d {
            grad[(i, j)] = cache.rstd[i] * (g_hat[j] - mean_g - xhat[j] * mean_gx);
        }
    }
    grad
}

fn add_row_bias(m: &mut Matrix, bias: &[f64]) {
    for i in 0..m.rows() {
        m.row_mut(i).iter_mut().zip(bias).for_each(|(x, b)| *x += b);
    }
}

fn add_assign(a: &mut Matrix, b: &Matrix) {
    a.as_mut_slice().iter_mut().zip(b.as_slice()).for_each(|(x, y)| *x += y);
}

/// Runs the encoder on `E` and returns the output at `eot_index`.
pub fn encode_forward(
    weights: &EncoderWeights,
    embeddings: &Matrix,
    eot_index: usize,
) -> Result<(EotVector, ForwardCache)> {
    if embeddings.rows() != CONTEXT_LENGTH || embeddings.cols() != D_MODEL {
        return Err(Error::Consistency(format!(
            "embedding matrix must be {CONTEXT_LENGTH} x {D_MODEL}, got {} x {}",
            embeddings.rows(),
            embeddings.cols()
        )));
    }
    if eot_index >= CONTEXT_LENGTH {
        return Err(Error::Config(format!(
            "eot_index {eot_index} is outside [0, {CONTEXT_LENGTH})"
        )));
    }
    let n = eot_index + 1;
    let scale = 1.0 / (D_MODEL as f64).sqrt();

    let mut h = Matrix::zeros(n, D_MODEL);
    for i in 0..n {
        for j in 0..D_MODEL {
            h[(i, j)] = embeddings[(i, j)] + weights.positional[(i, j)];
        }
    }

    let mut blocks = Vec::with_capacity(weights.blocks.len());
    for blk in &weights.blocks {
        let (n1, ln1) = ln_forward(&h, &blk.ln1);
        let q = n1.matmul(&blk.w_q);
        let k = n1.matmul(&blk.w_k);
        let v = n1.matmul(&blk.w_v);
        let mut probs = Matrix::zeros(n, n);
        let mut attended = Matrix::zeros(n, D_MODEL);
        for i in 0..n {
            let row = probs.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                row[j] = dot(q.row(i), k.row(j)) * scale;
                max = max.max(row[j]);
            }
            let mut sum = 0.0;
            for p in &mut row[..=i] {
                *p = (*p - max).exp();
                sum += *p;
            }
            row[..=i].iter_mut().for_each(|p| *p /= sum);
            for j in 0..=i {
                let p = probs[(i, j)];
                attended.row_mut(i).iter_mut().zip(v.row(j)).for_each(|(a, vj)| *a += p * vj);
            }
        }
        add_assign(&mut h, &attended.matmul(&blk.w_o));

        let (n2, ln2) = ln_forward(&h, &blk.ln2);
        let mut z = n2.matmul(&blk.w1);
        add_row_bias(&mut z, &blk.b1);
        z.as_mut_slice().iter_mut().for_each(|x| *x = x.tanh());
        let mut m = z.matmul(&blk.w2);
        add_row_bias(&mut m, &blk.b2);
        add_assign(&mut h, &m);

        blocks.push(BlockCache {
            ln1,
            q,
            k,
            v,
            probs,
            ln2,
            t: z,
        });
    }

    let (nf, final_ln) = ln_forward(&h, &weights.ln_final);
    let vector = weights.w_out.vec_mul(nf.row(eot_index));
    Ok((
        EotVector { vector, eot_index },
        ForwardCache {
            eot_index,
            blocks,
            final_ln,
        },
    ))
}

/// Gradient of `<grad_eot, v_eot>` with respect to `E`, i.e. the
/// vector-Jacobian product for an upstream gradient `grad_eot`. Rows after
/// the EOT position are exactly zero.
pub fn encode_backward(weights: &EncoderWeights, cache: &ForwardCache, grad_eot: &[f64]) -> Result<Matrix> {
    if grad_eot.len() != D_MODEL {
        return Err(Error::DimMismatch {
            expected: D_MODEL,
            got: grad_eot.len(),
        });
    }
    if cache.blocks.len() != weights.blocks.len() || cache.final_ln.xhat.rows() != cache.eot_index + 1 {
        return Err(Error::Consistency("forward cache does not match these weights".into()));
    }
    let n = cache.eot_index + 1;
    let scale = 1.0 / (D_MODEL as f64).sqrt();

    let mut g_nf = Matrix::zeros(n, D_MODEL);
    g_nf.row_mut(cache.eot_index).copy_from_slice(&weights.w_out.mul_vec(grad_eot));
    let mut g_h = ln_backward(&g_nf, &cache.final_ln, &weights.ln_final);

    for (blk, bc) in weights.blocks.iter().zip(&cache.blocks).rev() {
        // MLP branch.
        let mut g_z = g_h.matmul_t(&blk.w2);
        g_z.as_mut_slice()
            .iter_mut()
            .zip(bc.t.as_slice())
            .for_each(|(g, t)| *g *= 1.0 - t * t);
        let g_n2 = g_z.matmul_t(&blk.w1);
        add_assign(&mut g_h, &ln_backward(&g_n2, &bc.ln2, &blk.ln2));

        // Attention branch.
        let g_a = g_h.matmul_t(&blk.w_o);
        let mut g_q = Matrix::zeros(n, D_MODEL);
        let mut g_k = Matrix::zeros(n, D_MODEL);
        let mut g_v = Matrix::zeros(n, D_MODEL);
        let mut g_p = vec![0.0; n];
        for i in 0..n {
            let ga = g_a.row(i);
            for j in 0..=i {
                let p = bc.probs[(i, j)];
                g_v.row_mut(j).iter_mut().zip(ga).for_each(|(gv, g)| *gv += p * g);
                g_p[j] = dot(ga, bc.v.row(j));
            }
            let weighted: f64 = (0..=i).map(|j| bc.probs[(i, j)] * g_p[j]).sum();
            for j in 0..=i {
                let g_s = bc.probs[(i, j)] * (g_p[j] - weighted) * scale;
                if g_s != 0.0 {
                    g_q.row_mut(i).iter_mut().zip(bc.k.row(j)).for_each(|(g, kj)| *g += g_s * kj);
                    g_k.row_mut(j).iter_mut().zip(bc.q.row(i)).for_each(|(g, qi)| *g += g_s * qi);
                }
            }
        }
        let mut g_n1 = g_q.matmul_t(&blk.w_q);
        add_assign(&mut g_n1, &g_k.matmul_t(&blk.w_k));
        add_assign(&mut g_n1, &g_v.matmul_t(&blk.w_v));
        add_assign(&mut g_h, &ln_backward(&g_n1, &bc.ln1, &blk.ln1));
    }

    let mut grad = Matrix::zeros(CONTEXT_LENGTH, D_MODEL);
    for i in 0..n {
        grad.row_mut(i).copy_from_slice(g_h.row(i));
    }
    Ok(grad)
}

/// Tokenizes `text` and encodes it at its own EOT position.
pub fn encode_text(weights: &EncoderWeights, text: &str) -> Result<EotVector> {
    let ids = tokenize(text)?;
    let e = embed_tokens(weights, &ids)?;
    let idx = eot_position(&ids).expect("tokenize always emits eot");
    Ok(encode_forward(weights, &e, idx)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("cat").unwrap(), vec![1, 5, 3, 22, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let empty = tokenize("").unwrap();
        assert_eq!(&empty[..3], &[1, 2, 0]);
        assert_eq!(empty.len(), CONTEXT_LENGTH);
        assert!(tokenize("Ω").is_err());
        assert!(tokenize("abcdefghijklmn").is_ok());
        assert!(tokenize("abcdefghijklmno").is_err());
        assert_eq!(tokenize("A 9").unwrap()[1..4], [3, 29, 39]);
    }

    #[test]
    fn detokenize_examples() {
        assert_eq!(detokenize(&tokenize("cat").unwrap()).unwrap(), "cat");
        assert_eq!(detokenize(&[0; 16]).unwrap(), "");
        assert!(detokenize(&[1, 40, 2]).is_err());
        assert_eq!(detokenize(&[7, 1, 3, 0, 4, 2, 5]).unwrap(), "ab");
    }

    #[test]
    fn init_is_deterministic_with_identity_norms() {
        let a = init_encoder(3);
        assert_eq!(a, init_encoder(3));
        assert_ne!(a.token_table, init_encoder(4).token_table);
        for blk in &a.blocks {
            assert!(blk.ln1.gamma.iter().chain(&blk.ln2.gamma).all(|&g| g == 1.0));
            assert!(blk.ln1.beta.iter().chain(&blk.ln2.beta).all(|&b| b == 0.0));
            assert!(blk.b1.iter().chain(&blk.b2).all(|&b| b == 0.0));
            assert_eq!((blk.w1.rows(), blk.w1.cols()), (D_MODEL, HIDDEN));
            assert_eq!((blk.w2.rows(), blk.w2.cols()), (HIDDEN, D_MODEL));
        }
        assert_eq!(a.blocks.len(), NUM_BLOCKS);
        assert!(a.ln_final.gamma.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn embed_rows_come_from_the_table() {
        let w = init_encoder(1);
        let ids = [9; CONTEXT_LENGTH];
        let e = embed_tokens(&w, &ids).unwrap();
        assert_eq!((e.rows(), e.cols()), (CONTEXT_LENGTH, D_MODEL));
        assert!(e.iter_rows().all(|r| r == w.token_table.row(9)));
        let e = embed_tokens(&w, &tokenize("hi").unwrap()).unwrap();
        assert_eq!(e.row(10), w.token_table.row(PAD));
        assert!(embed_tokens(&w, &[0; 3]).is_err());
    }

    #[test]
    fn eot_index_out_of_range() {
        let w = init_encoder(1);
        let e = embed_tokens(&w, &tokenize("cat").unwrap()).unwrap();
        assert!(encode_forward(&w, &e, CONTEXT_LENGTH).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let w = init_encoder(2);
        let e = embed_tokens(&w, &tokenize("dog").unwrap()).unwrap();
        let (_, cache) = encode_forward(&w, &e, 4).unwrap();
        let g = encode_backward(&w, &cache, &[0.0; D_MODEL]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(encode_backward(&w, &cache, &[0.0; 3]).is_err());
    }
}
