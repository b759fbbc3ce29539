//! Parameterized layers recorded on a [`Tape`].

use rand::Rng;

use super::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let weight = store.add(
            format!("{name}.weight"),
            xavier(rng, in_dim, out_dim, &[in_dim, out_dim]),
        )?;
        let bias = if bias {
            // Nonzero so ReLU inputs do not start exactly at the kink.
            let bound = 1.0 / (in_dim as f64).sqrt();
            let data = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
            Some(store.add(format!("{name}.bias"), Tensor::new(vec![out_dim], data)?)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => tape.add_row(y, tape.param(store, b)),
            None => Ok(y),
        }
    }
}

/// Stack of [`Linear`] layers with ReLU between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        if dims.len() < 2 {
            return Err(TensorError::Config(format!(
                "{name}: an MLP needs at least input and output dims"
            )));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Config(format!(
                "attention dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `queries: [n, dim]`, `keys`/`values: [m, dim]` → `[n, dim]`.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<Var, TensorError> {
        let q = self.query.forward(tape, store, queries)?;
        let k = self.key.forward(tape, store, keys)?;
        let v = self.value.forward(tape, store, values)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.narrow(q, 1, h * dh, dh)?;
            let kh = tape.narrow(k, 1, h * dh, dh)?;
            let vh = tape.narrow(v, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.scale(tape.matmul(qh, kt)?, scale)?;
            let weights = tape.softmax(scores)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        self.output.forward(tape, store, joined)
    }
}

/// Rank-factorized trilinear form `Σ_k (x U)_k (v V)_k (p T)_k`.
///
/// Factors are stored as `[dim, rank]` so rows can be multiplied directly.
#[derive(Clone, Debug)]
pub struct Trilinear {
    pub u: ParamId,
    pub v: ParamId,
    pub t: ParamId,
    pub dim: usize,
    pub rank: usize,
}

impl Trilinear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rank: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        if rank == 0 {
            return Err(TensorError::Config(
                "trilinear rank must be at least 1".into(),
            ));
        }
        // Unit-scale projections keep the triple product away from zero at init.
        let init = |rng: &mut _| {
            let bound = (3.0 / dim as f64).sqrt();
            let data = (0..dim * rank)
                .map(|_| Rng::gen_range(rng, -bound..bound))
                .collect();
            Tensor::new(vec![dim, rank], data).expect("finite init")
        };
        Ok(Self {
            u: store.add(format!("{name}.u"), init(rng))?,
            v: store.add(format!("{name}.v"), init(rng))?,
            t: store.add(format!("{name}.t"), init(rng))?,
            dim,
            rank,
        })
    }

    /// Inputs are `[1, dim]` rows; output is `[1]`.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: Var,
        v: Var,
        p: Var,
    ) -> Result<Var, TensorError> {
        let xu = tape.matmul(x, tape.param(store, self.u))?;
        let vv = tape.matmul(v, tape.param(store, self.v))?;
        let pt = tape.matmul(p, tape.param(store, self.t))?;
        let prod = tape.mul(tape.mul(xu, vv)?, pt)?;
        tape.sum(prod)
    }

    /// Factors in `[rank, dim]` layout, as taken by
    /// [`super::trilinear_factorized`].
    pub fn factors(&self, store: &ParamStore) -> Result<(Tensor, Tensor, Tensor), TensorError> {
        Ok((
            store.value(self.u).transpose()?,
            store.value(self.v).transpose()?,
            store.value(self.t).transpose()?,
        ))
    }
}
