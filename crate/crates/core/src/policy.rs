//! Differentiable softmax policies: linear in action-blocked features, and a
//! two-layer sigmoid perceptron with a softmax output layer.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{log_softmax_at, softmax, ActionId, Policy, StateVec};
use crate::scalar::Real;

/// Layout of a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamShape {
    /// `actions × features` weights, one block per action.
    Linear { features: usize, actions: usize },
    /// First layer `hidden × (inputs + 1)`, second layer `actions × (hidden + 1)`;
    /// column 0 of each is the bias.
    Mlp {
        inputs: usize,
        hidden: usize,
        actions: usize,
    },
}

impl ParamShape {
    pub fn len(&self) -> usize {
        match *self {
            ParamShape::Linear { features, actions } => features * actions,
            ParamShape::Mlp {
                inputs,
                hidden,
                actions,
            } => hidden * (inputs + 1) + actions * (hidden + 1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Policy parameters θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams<T> {
    pub shape: ParamShape,
    pub values: Vec<T>,
}

impl<T: Real> PolicyParams<T> {
    pub fn new(shape: ParamShape, values: Vec<T>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.len(),
                got: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: ParamShape) -> Self {
        Self {
            shape,
            values: vec![T::zero(); shape.len()],
        }
    }

    /// i.i.d. `N(0, sd²)` entries.
    pub fn random<R: Rng + ?Sized>(shape: ParamShape, sd: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, sd).expect("finite standard deviation");
        let values = (0..shape.len())
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        Self { shape, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.values)
    }
}

impl PolicyParams<f64> {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: Self = serde_json::from_str(&text)?;
        Self::new(params.shape, params.values)
    }
}

pub fn l2_norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// State featurisation φ(s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap<T> {
    /// Raw state of the given dimension.
    Identity { dim: usize },
    /// Coordinate-wise division, `φ_i = s_i / divisors_i`.
    Scaled { divisors: Vec<T> },
    /// One-hot encoding of the integer-valued coordinate `coord` into `size` slots.
    OneHot { coord: usize, size: usize },
}

impl<T: Real> FeatureMap<T> {
    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Scaled { divisors } => divisors.len(),
            FeatureMap::OneHot { size, .. } => *size,
        }
    }

    pub fn apply(&self, state: &StateVec<T>) -> Vec<T> {
        let s = state.values();
        match self {
            FeatureMap::Identity { dim } => {
                debug_assert_eq!(s.len(), *dim);
                s.to_vec()
            }
            FeatureMap::Scaled { divisors } => {
                s.iter().zip(divisors).map(|(&x, &d)| x / d).collect()
            }
            FeatureMap::OneHot { coord, size } => {
                let mut out = vec![T::zero(); *size];
                let idx = s[*coord].round().to_usize().unwrap_or(usize::MAX);
                if let Some(slot) = out.get_mut(idx) {
                    *slot = T::one();
                }
                out
            }
        }
    }
}

/// `π_θ(a|s) ∝ exp(θ_aᵀ φ(s))`: the action-blocked one-hot form of
/// `θᵀ φ(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmax<T> {
    pub features: FeatureMap<T>,
    pub actions: usize,
}

impl<T: Real> LinearSoftmax<T> {
    pub fn new(features: FeatureMap<T>, actions: usize) -> Self {
        Self { features, actions }
    }

    pub fn shape(&self) -> ParamShape {
        ParamShape::Linear {
            features: self.features.dim(),
            actions: self.actions,
        }
    }

    /// Action-blocked feature vector φ(s, a): φ(s) in block `a`, zeros elsewhere.
    pub fn state_action_features(&self, state: &StateVec<T>, action: ActionId) -> Vec<T> {
        let phi = self.features.apply(state);
        let d = phi.len();
        let mut out = vec![T::zero(); d * self.actions];
        out[action.0 * d..(action.0 + 1) * d].copy_from_slice(&phi);
        out
    }
}

impl<T: Real> Policy<T> for LinearSoftmax<T> {
    type Params = PolicyParams<T>;

    fn action_count(&self) -> usize {
        self.actions
    }

    fn logits(&self, theta: &PolicyParams<T>, state: &StateVec<T>) -> Vec<T> {
        let phi = self.features.apply(state);
        let d = phi.len();
        (0..self.actions)
            .map(|a| {
                theta.values[a * d..(a + 1) * d]
                    .iter()
                    .zip(&phi)
                    .map(|(&w, &x)| w * x)
                    .sum()
            })
            .collect()
    }

    /// `φ(s,a) − Σ_a' π(a'|s) φ(s,a')`.
    fn grad_log_prob(&self, theta: &PolicyParams<T>, state: &StateVec<T>, action: ActionId) -> Vec<T> {
        let phi = self.features.apply(state);
        let probs = softmax(&self.logits(theta, state));
        let d = phi.len();
        let mut grad = vec![T::zero(); d * self.actions];
        for (b, &p) in probs.iter().enumerate() {
            let coef = if b == action.0 { T::one() - p } else { -p };
            for (g, &x) in grad[b * d..(b + 1) * d].iter_mut().zip(&phi) {
                *g = coef * x;
            }
        }
        grad
    }
}

/// Two-layer perceptron: `Z = σ(W·[1; φ(s)])`, `T = B·[1; Z]`, `π = softmax(T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub features: FeatureMap<T>,
    pub hidden: usize,
    pub actions: usize,
}

struct MlpForward<T> {
    input: Vec<T>,
    hidden: Vec<T>,
    logits: Vec<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new(features: FeatureMap<T>, hidden: usize, actions: usize) -> Self {
        Self {
            features,
            hidden,
            actions,
        }
    }

    pub fn shape(&self) -> ParamShape {
        ParamShape::Mlp {
            inputs: self.features.dim(),
            hidden: self.hidden,
            actions: self.actions,
        }
    }

    fn first_layer_len(&self) -> usize {
        self.hidden * (self.features.dim() + 1)
    }

    fn forward(&self, theta: &PolicyParams<T>, state: &StateVec<T>) -> MlpForward<T> {
        let input = self.features.apply(state);
        let din = input.len();
        let (w, b) = theta.values.split_at(self.first_layer_len());
        let hidden: Vec<T> = w
            .chunks_exact(din + 1)
            .map(|row| {
                let u = row[0]
                    + row[1..]
                        .iter()
                        .zip(&input)
                        .map(|(&wi, &xi)| wi * xi)
                        .sum::<T>();
                sigmoid(u)
            })
            .collect();
        let logits = b
            .chunks_exact(self.hidden + 1)
            .map(|row| {
                row[0]
                    + row[1..]
                        .iter()
                        .zip(&hidden)
                        .map(|(&bi, &zi)| bi * zi)
                        .sum::<T>()
            })
            .collect();
        MlpForward {
            input,
            hidden,
            logits,
        }
    }

    fn backward(&self, theta: &PolicyParams<T>, fwd: &MlpForward<T>, action: ActionId) -> Vec<T> {
        let din = fwd.input.len();
        let h = self.hidden;
        let probs = softmax(&fwd.logits);
        // d log π_a / d logits
        let delta_out: Vec<T> = probs
            .iter()
            .enumerate()
            .map(|(l, &p)| if l == action.0 { T::one() - p } else { -p })
            .collect();
        let split = self.first_layer_len();
        let b = &theta.values[split..];
        let mut grad = vec![T::zero(); theta.values.len()];
        let (gw, gb) = grad.split_at_mut(split);
        let mut delta_hidden = vec![T::zero(); h];
        for (l, &dl) in delta_out.iter().enumerate() {
            let row = &b[l * (h + 1)..(l + 1) * (h + 1)];
            let grow = &mut gb[l * (h + 1)..(l + 1) * (h + 1)];
            grow[0] = dl;
            for d in 0..h {
                grow[d + 1] = dl * fwd.hidden[d];
                delta_hidden[d] = delta_hidden[d] + dl * row[d + 1];
            }
        }
        for d in 0..h {
            let z = fwd.hidden[d];
            let du = delta_hidden[d] * z * (T::one() - z);
            let grow = &mut gw[d * (din + 1)..(d + 1) * (din + 1)];
            grow[0] = du;
            for (g, &x) in grow[1..].iter_mut().zip(&fwd.input) {
                *g = du * x;
            }
        }
        grad
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Policy<T> for Mlp<T> {
    type Params = PolicyParams<T>;

    fn action_count(&self) -> usize {
        self.actions
    }

    fn logits(&self, theta: &PolicyParams<T>, state: &StateVec<T>) -> Vec<T> {
        self.forward(theta, state).logits
    }

    fn grad_log_prob(&self, theta: &PolicyParams<T>, state: &StateVec<T>, action: ActionId) -> Vec<T> {
        let fwd = self.forward(theta, state);
        self.backward(theta, &fwd, action)
    }

    fn log_prob_and_grad(
        &self,
        theta: &PolicyParams<T>,
        state: &StateVec<T>,
        action: ActionId,
    ) -> (T, Vec<T>) {
        let fwd = self.forward(theta, state);
        let lp = log_softmax_at(&fwd.logits, action.0);
        (lp, self.backward(theta, &fwd, action))
    }
}

/// Either policy family, chosen at configuration time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum AnyPolicy<T> {
    Linear(LinearSoftmax<T>),
    Mlp(Mlp<T>),
}

impl<T: Real> AnyPolicy<T> {
    pub fn shape(&self) -> ParamShape {
        match self {
            AnyPolicy::Linear(p) => p.shape(),
            AnyPolicy::Mlp(p) => p.shape(),
        }
    }
}

impl<T: Real> Policy<T> for AnyPolicy<T> {
    type Params = PolicyParams<T>;

    fn action_count(&self) -> usize {
        match self {
            AnyPolicy::Linear(p) => p.action_count(),
            AnyPolicy::Mlp(p) => p.action_count(),
        }
    }

    fn logits(&self, theta: &PolicyParams<T>, state: &StateVec<T>) -> Vec<T> {
        match self {
            AnyPolicy::Linear(p) => p.logits(theta, state),
            AnyPolicy::Mlp(p) => p.logits(theta, state),
        }
    }

    fn grad_log_prob(&self, theta: &PolicyParams<T>, state: &StateVec<T>, action: ActionId) -> Vec<T> {
        match self {
            AnyPolicy::Linear(p) => p.grad_log_prob(theta, state, action),
            AnyPolicy::Mlp(p) => p.grad_log_prob(theta, state, action),
        }
    }

    fn log_prob_and_grad(
        &self,
        theta: &PolicyParams<T>,
        state: &StateVec<T>,
        action: ActionId,
    ) -> (T, Vec<T>) {
        match self {
            AnyPolicy::Linear(p) => p.log_prob_and_grad(theta, state, action),
            AnyPolicy::Mlp(p) => p.log_prob_and_grad(theta, state, action),
        }
    }
}
