//! Transformer building blocks on top of the tape.

use rand::Rng;

use crate::autodiff::{Tape, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive attention-mask value for blocked positions. `exp` of it
/// underflows to exactly zero after max subtraction.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.normal(
            rng,
            format!("{name}.w"),
            vec![in_dim, out_dim],
            (1.0 / in_dim as f64).sqrt(),
        );
        let b = store.insert(format!("{name}.b"), Tensor::zeros(vec![out_dim]));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add_row(y, p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::full(vec![d], 1.0)),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(vec![d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias), LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide width {d}"
            )));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            heads,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        xq: Var,
        xkv: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, xq, xkv, mask)?.0)
    }

    /// Also returns the per-head attention matrices (`Lq × Lk`, rows sum to 1).
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        p: &Bound,
        xq: Var,
        xkv: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(tape, p, xq)?;
        let k = self.k.forward(tape, p, xkv)?;
        let v = self.v.forward(tape, p, xkv)?;
        let d = self.q.out_dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = tape.matmul_t(qh, kh)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let a = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        Ok((self.o.forward(tape, p, cat)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, p, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln1: Norm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, heads)?,
            ln2: Norm::new(store, &format!("{name}.ln2"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, hidden),
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h, h, mask)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let f = self.ff.forward(tape, p, h)?;
        tape.add(x, f)
    }

    pub fn attention(&self) -> &Attention {
        &self.attn
    }
}

/// Pre-norm block with causal self-attention and cross-attention to a memory.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross_attn: Attention,
    ln3: Norm,
    ff: FeedForward,
}

impl DecoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln1: Norm::new(store, &format!("{name}.ln1"), d),
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), d, heads)?,
            ln2: Norm::new(store, &format!("{name}.ln2"), d),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), d, heads)?,
            ln3: Norm::new(store, &format!("{name}.ln3"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, hidden),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        memory: Var,
        causal: Var,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let a = self.self_attn.forward(tape, p, h, h, Some(causal))?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let c = self.cross_attn.forward(tape, p, h, memory, None)?;
        let x = tape.add(x, c)?;
        let h = self.ln3.forward(tape, p, x)?;
        let f = self.ff.forward(tape, p, h)?;
        tape.add(x, f)
    }
}

/// `n × n` additive mask blocking attention to later positions.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASK_NEG;
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// `n × n` additive mask blocking the key positions flagged in `blocked`.
pub fn key_mask(blocked: &[bool]) -> Tensor {
    let n = blocked.len();
    let row: Vec<f64> = blocked
        .iter()
        .map(|&b| if b { MASK_NEG } else { 0.0 })
        .collect();
    Tensor::new(vec![n, n], row.repeat(n)).expect("square mask")
}
