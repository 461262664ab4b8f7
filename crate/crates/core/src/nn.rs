//! Dense layers and MLPs on top of [`crate::diffcore`], plus a tape-free
//! inference path for rollouts.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Graph, ModelParams, Tensor, Var};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Act {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Act::Identity => x,
            Act::Relu => g.relu(x),
            Act::Tanh => g.tanh(x),
            Act::Sigmoid => g.sigmoid(x),
        }
    }

    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Act::Identity => x,
            Act::Relu => x.max(T::zero()),
            Act::Tanh => x.tanh(),
            Act::Sigmoid => crate::diffcore::sigmoid(x),
        }
    }
}

/// How a linear layer's weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    FanIn,
    /// `N(0, std)` weights truncated at two standard deviations, zero biases.
    TruncNormal(f64),
    Zeros,
}

/// Adds `{name}.w [fan_in, fan_out]` and `{name}.b [fan_out]`.
pub fn init_linear<T: Real>(params: &mut ModelParams<T>, name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut Rng) -> Result<()> {
    let (w, b) = match init {
        Init::FanIn => {
            let k = 1.0 / (fan_in as f64).sqrt();
            let w = Tensor::from_fn(&[fan_in, fan_out], |_| T::lit(rng.random_range(-k..k)));
            let b = Tensor::from_fn(&[fan_out], |_| T::lit(rng.random_range(-k..k)));
            (w, b)
        }
        Init::TruncNormal(std) => {
            let n = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let w = Tensor::from_fn(&[fan_in, fan_out], |_| loop {
                let v: f64 = n.sample(rng);
                if v.abs() <= 2.0 * std {
                    break T::lit(v);
                }
            });
            (w, Tensor::zeros(&[fan_out]))
        }
        Init::Zeros => (Tensor::zeros(&[fan_in, fan_out]), Tensor::zeros(&[fan_out])),
    };
    params.insert(format!("{name}.w"), w, true)?;
    params.insert(format!("{name}.b"), b, true)
}

/// `x @ w + b` with parameters `{name}.w`, `{name}.b`; frozen when `constant`.
pub fn linear<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>, name: &str, x: Var, constant: bool) -> Result<Var> {
    let (wn, bn) = (format!("{name}.w"), format!("{name}.b"));
    let (w, b) = if constant {
        (g.param_const(params, &wn)?, g.param_const(params, &bn)?)
    } else {
        (g.param(params, &wn)?, g.param(params, &bn)?)
    };
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// `rows x fan_in` input to `rows x fan_out`, without a tape.
pub fn linear_infer<T: Real>(params: &ModelParams<T>, name: &str, x: &[T], rows: usize) -> Result<Vec<T>> {
    let w = params.get(&format!("{name}.w"))?;
    let b = params.get(&format!("{name}.b"))?;
    let (k, n) = (w.shape()[0], w.shape()[1]);
    if x.len() != rows * k {
        return Err(Error::Shape(format!("linear `{name}` expects {k} inputs per row, got {} values for {rows} rows", x.len())));
    }
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    T::gemm(rows, k, n, T::one(), x, k as isize, 1, w.data(), n as isize, 1, T::one(), &mut out, n as isize, 1);
    Ok(out)
}

/// Fully connected network `sizes[0] -> .. -> sizes[last]` with layers named
/// `{prefix}.l{i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
    pub hidden: Act,
    pub out: Act,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, sizes: Vec<usize>, hidden: Act, out: Act) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("MLP needs at least two positive sizes, got {sizes:?}")));
        }
        Ok(Self { prefix: prefix.into(), sizes, hidden, out })
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_name(&self, i: usize) -> String {
        format!("{}.l{i}", self.prefix)
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Closed-form parameter count.
    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn init<T: Real>(&self, params: &mut ModelParams<T>, init: Init, rng: &mut Rng) -> Result<()> {
        for i in 0..self.n_layers() {
            init_linear(params, &self.layer_name(i), self.sizes[i], self.sizes[i + 1], init, rng)?;
        }
        Ok(())
    }

    fn act(&self, i: usize) -> Act {
        if i + 1 == self.n_layers() {
            self.out
        } else {
            self.hidden
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ModelParams<T>, x: Var, constant: bool) -> Result<Var> {
        let mut h = x;
        for i in 0..self.n_layers() {
            h = linear(g, params, &self.layer_name(i), h, constant)?;
            h = self.act(i).apply(g, h);
        }
        Ok(h)
    }

    pub fn infer<T: Real>(&self, params: &ModelParams<T>, x: &[T], rows: usize) -> Result<Vec<T>> {
        let mut h = x.to_vec();
        for i in 0..self.n_layers() {
            h = linear_infer(params, &self.layer_name(i), &h, rows)?;
            let a = self.act(i);
            h.iter_mut().for_each(|v| *v = a.eval(*v));
        }
        Ok(h)
    }
}
