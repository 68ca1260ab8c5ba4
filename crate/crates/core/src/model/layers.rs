use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::bitlinear::{Child, ChildMut, LinearLayer, LinearSlot, Module};
use crate::error::Result;
use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-6;
/// Added to masked attention scores; large enough that `exp` underflows to 0.
const MASK: f64 = -1e9;

/// Affine LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub(crate) fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], T::one()), false),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[d]), false),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let s = tape.param(self.shift);
        tape.layer_norm(x, Some(g), Some(s), T::lit(LN_EPS))
    }
}

/// Row range `[start, start + len)` of one sample inside a stacked batch.
pub type Segment = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: LinearSlot,
    pub k: LinearSlot,
    pub v: LinearSlot,
    pub o: LinearSlot,
}

impl Attention {
    pub(crate) fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut lin = |n: &str| LinearSlot::Plain(LinearLayer::init(store, &format!("{name}.{n}"), d, d, bias, std, rng));
        Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
        }
    }
}

impl Module for Attention {
    fn children(&self) -> Vec<(String, Child<'_>)> {
        vec![
            ("q".into(), Child::Linear(&self.q)),
            ("k".into(), Child::Linear(&self.k)),
            ("v".into(), Child::Linear(&self.v)),
            ("o".into(), Child::Linear(&self.o)),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, ChildMut<'_>)> {
        vec![
            ("q".into(), ChildMut::Linear(&mut self.q)),
            ("k".into(), ChildMut::Linear(&mut self.k)),
            ("v".into(), ChildMut::Linear(&mut self.v)),
            ("o".into(), ChildMut::Linear(&mut self.o)),
        ]
    }
}

/// Multi-head scaled dot-product attention over already projected `q`, `k`,
/// `v`. Sample `i` attends from rows `q_segs[i]` of `q` to rows `k_segs[i]`
/// of `k`/`v`. With `causal`, query `t` of a sample sees keys `0..=t`
/// (offset so the last query lines up with the last key).
pub fn multi_head<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    q_segs: &[Segment],
    k_segs: &[Segment],
    n_heads: usize,
    causal: bool,
) -> Result<Var> {
    let (rows, d) = (tape.value(q).rows(), tape.value(q).cols());
    let dh = d / n_heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut parts = Vec::with_capacity(q_segs.len() * n_heads);
    for (&(q0, nq), &(k0, nk)) in q_segs.iter().zip(k_segs) {
        let mask = (causal && nq > 1).then(|| {
            let shift = nk - nq;
            let mut m = Tensor::zeros(&[nq, nk]);
            for i in 0..nq {
                for j in i + shift + 1..nk {
                    m.row_mut(i)[j] = T::lit(MASK);
                }
            }
            tape.constant(m)
        });
        for h in 0..n_heads {
            let qh = tape.slice(q, q0, nq, h * dh, dh)?;
            let kh = tape.slice(k, k0, nk, h * dh, dh)?;
            let vh = tape.slice(v, k0, nk, h * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let mut s = tape.scale(s, scale);
            if let Some(m) = mask {
                s = tape.add(s, m)?;
            }
            let p = tape.softmax(s);
            let out = tape.matmul(p, vh)?;
            parts.push((out, q0, h * dh));
        }
    }
    tape.assemble(rows, d, &parts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub wi: LinearSlot,
    pub wo: LinearSlot,
}

impl FeedForward {
    pub(crate) fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        d_ff: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            wi: LinearSlot::Plain(LinearLayer::init(store, &format!("{name}.wi"), d, d_ff, bias, std, rng)),
            wo: LinearSlot::Plain(LinearLayer::init(store, &format!("{name}.wo"), d_ff, d, bias, std, rng)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.wi.forward(tape, x)?;
        let h = tape.gelu(h);
        self.wo.forward(tape, h)
    }
}

impl Module for FeedForward {
    fn children(&self) -> Vec<(String, Child<'_>)> {
        vec![("wi".into(), Child::Linear(&self.wi)), ("wo".into(), Child::Linear(&self.wo))]
    }

    fn children_mut(&mut self) -> Vec<(String, ChildMut<'_>)> {
        vec![
            ("wi".into(), ChildMut::Linear(&mut self.wi)),
            ("wo".into(), ChildMut::Linear(&mut self.wo)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub ln_attn: Norm,
    pub attn: Attention,
    pub ln_ffn: Norm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, segs: &[Segment], n_heads: usize) -> Result<Var> {
        let a = self.ln_attn.forward(tape, x)?;
        let q = self.attn.q.forward(tape, a)?;
        let k = self.attn.k.forward(tape, a)?;
        let v = self.attn.v.forward(tape, a)?;
        let ctx = multi_head(tape, q, k, v, segs, segs, n_heads, false)?;
        let o = self.attn.o.forward(tape, ctx)?;
        let x = tape.add(x, o)?;
        let f = self.ln_ffn.forward(tape, x)?;
        let f = self.ffn.forward(tape, f)?;
        tape.add(x, f)
    }
}

impl Module for EncoderBlock {
    fn children(&self) -> Vec<(String, Child<'_>)> {
        vec![
            ("ln_attn".into(), Child::Other("layer_norm")),
            ("attn".into(), Child::Module(&self.attn)),
            ("ln_ffn".into(), Child::Other("layer_norm")),
            ("ffn".into(), Child::Module(&self.ffn)),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, ChildMut<'_>)> {
        vec![
            ("ln_attn".into(), ChildMut::Other("layer_norm")),
            ("attn".into(), ChildMut::Module(&mut self.attn)),
            ("ln_ffn".into(), ChildMut::Other("layer_norm")),
            ("ffn".into(), ChildMut::Module(&mut self.ffn)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub ln_self: Norm,
    pub self_attn: Attention,
    pub ln_cross: Norm,
    pub cross_attn: Attention,
    pub ln_ffn: Norm,
    pub ffn: FeedForward,
}

/// Keys and values seen by one decoder block.
pub(crate) struct DecoderKv {
    pub self_k: Var,
    pub self_v: Var,
    pub self_segs: Vec<Segment>,
    pub cross_k: Var,
    pub cross_v: Var,
    pub cross_segs: Vec<Segment>,
}

impl DecoderBlock {
    /// Self-attention projections of the normed input: `(normed, q, k, v)`.
    pub(crate) fn self_qkv<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<(Var, Var, Var)> {
        let a = self.ln_self.forward(tape, x)?;
        let q = self.self_attn.q.forward(tape, a)?;
        let k = self.self_attn.k.forward(tape, a)?;
        let v = self.self_attn.v.forward(tape, a)?;
        Ok((q, k, v))
    }

    pub(crate) fn cross_kv<T: Scalar>(&self, tape: &mut Tape<'_, T>, memory: Var) -> Result<(Var, Var)> {
        let k = self.cross_attn.k.forward(tape, memory)?;
        let v = self.cross_attn.v.forward(tape, memory)?;
        Ok((k, v))
    }

    /// Rest of the block once the self-attention query and all keys/values
    /// are known.
    pub(crate) fn finish<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        q: Var,
        q_segs: &[Segment],
        kv: &DecoderKv,
        n_heads: usize,
    ) -> Result<Var> {
        let ctx = multi_head(tape, q, kv.self_k, kv.self_v, q_segs, &kv.self_segs, n_heads, true)?;
        let o = self.self_attn.o.forward(tape, ctx)?;
        let x = tape.add(x, o)?;

        let c = self.ln_cross.forward(tape, x)?;
        let cq = self.cross_attn.q.forward(tape, c)?;
        let ctx = multi_head(tape, cq, kv.cross_k, kv.cross_v, q_segs, &kv.cross_segs, n_heads, false)?;
        let o = self.cross_attn.o.forward(tape, ctx)?;
        let x = tape.add(x, o)?;

        let f = self.ln_ffn.forward(tape, x)?;
        let f = self.ffn.forward(tape, f)?;
        tape.add(x, f)
    }
}

impl Module for DecoderBlock {
    fn children(&self) -> Vec<(String, Child<'_>)> {
        vec![
            ("ln_self".into(), Child::Other("layer_norm")),
            ("self_attn".into(), Child::Module(&self.self_attn)),
            ("ln_cross".into(), Child::Other("layer_norm")),
            ("cross_attn".into(), Child::Module(&self.cross_attn)),
            ("ln_ffn".into(), Child::Other("layer_norm")),
            ("ffn".into(), Child::Module(&self.ffn)),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, ChildMut<'_>)> {
        vec![
            ("ln_self".into(), ChildMut::Other("layer_norm")),
            ("self_attn".into(), ChildMut::Module(&mut self.self_attn)),
            ("ln_cross".into(), ChildMut::Other("layer_norm")),
            ("cross_attn".into(), ChildMut::Module(&mut self.cross_attn)),
            ("ln_ffn".into(), ChildMut::Other("layer_norm")),
            ("ffn".into(), ChildMut::Module(&mut self.ffn)),
        ]
    }
}

/// Numbered sequence of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack<B> {
    pub blocks: Vec<B>,
}

impl<B: Module> Module for Stack<B> {
    fn children(&self) -> Vec<(String, Child<'_>)> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (i.to_string(), Child::Module(b as &dyn Module)))
            .collect()
    }

    fn children_mut(&mut self) -> Vec<(String, ChildMut<'_>)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .map(|(i, b)| (i.to_string(), ChildMut::Module(b as &mut dyn Module)))
            .collect()
    }
}
