use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::metrics::sigmoid;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Logistic,
}

impl Link {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Link::Logistic => sigmoid(z),
        }
    }
}

/// `f(x) = link(w.x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub w: Vec<f64>,
    pub b: f64,
    pub link: Link,
}

impl LinearClassifier {
    pub fn zeros(d: usize) -> Self {
        Self {
            w: vec![0.0; d],
            b: 0.0,
            link: Link::Logistic,
        }
    }
}

/// Mean `w.x` with a constant variance estimate `c > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoMomentRegressor {
    pub w: Vec<f64>,
    pub c: f64,
}

/// Fully connected tanh network with a logistic output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    /// `[input, hidden..., 1]`
    widths: Vec<usize>,
    /// Per layer: row-major weights `[out x in]` followed by biases `[out]`.
    params: Vec<f64>,
}

impl MlpClassifier {
    /// Glorot-normal weights and zero biases.
    pub fn new(input: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if input == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for l in 0..widths.len() - 1 {
            let (i, o) = (widths[l], widths[l + 1]);
            let sd = (2.0 / (i + o) as f64).sqrt();
            let normal = Normal::new(0.0, sd).expect("positive sd");
            params.extend((0..i * o).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, o));
        }
        Ok(Self { widths, params })
    }

    /// Three hidden layers of width 16.
    pub fn default_for(input: usize, seed: u64) -> Result<Self> {
        Self::new(input, &[16, 16, 16], seed)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn from_parts(widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || *widths.last().unwrap() != 1 || widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "MLP widths must be [input, hidden..., 1]".into(),
            ));
        }
        let n: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: params.len(),
            });
        }
        Ok(Self { widths, params })
    }

    /// Activations of every layer (post-tanh for hidden layers, raw logit last).
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let layers = self.widths.len() - 1;
        for l in 0..layers {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[off..off + i * o];
            let b = &self.params[off + i * o..off + i * o + o];
            let input = acts.last().unwrap();
            let out: Vec<f64> = (0..o)
                .map(|r| {
                    let z = b[r]
                        + w[r * i..(r + 1) * i]
                            .iter()
                            .zip(input)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    if l + 1 < layers {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
            off += i * o + o;
        }
        acts
    }

    fn logit(&self, x: &[f64]) -> f64 {
        self.activations(x).last().unwrap()[0]
    }

    /// Adds `g * d logit / d params` into `grad`.
    fn backprop(&self, x: &[f64], g: f64, grad: &mut [f64]) {
        let acts = self.activations(x);
        let layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        // delta = d logit / d pre-activation of the current layer, scaled by g
        let mut delta = vec![g];
        for l in (0..layers).rev() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let input = &acts[l];
            for r in 0..o {
                for c in 0..i {
                    grad[off + r * i + c] += delta[r] * input[c];
                }
                grad[off + i * o + r] += delta[r];
            }
            if l > 0 {
                let w = &self.params[off..off + i * o];
                delta = (0..i)
                    .map(|c| {
                        let back: f64 = (0..o).map(|r| w[r * i + c] * delta[r]).sum();
                        back * (1.0 - input[c] * input[c])
                    })
                    .collect();
            }
        }
    }
}

/// A predictor with a flat parameter vector.
///
/// Classifiers output `P(Y = 1 | x)` through a logit; the regressor outputs
/// its mean `w.x` (the "logit" of a regressor is its mean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub enum Model {
    Linear(LinearClassifier),
    Mlp(MlpClassifier),
    TwoMoment(TwoMomentRegressor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Family {
    Linear,
    Mlp,
    TwoMoment,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    family: Family,
    shapes: Vec<Vec<usize>>,
    params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    link: Option<Link>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variance: Option<f64>,
}

impl From<Model> for ModelRepr {
    fn from(m: Model) -> Self {
        let params = m.params();
        match m {
            Model::Linear(l) => ModelRepr {
                family: Family::Linear,
                shapes: vec![vec![l.w.len()], vec![1]],
                params,
                link: Some(l.link),
                variance: None,
            },
            Model::Mlp(n) => ModelRepr {
                family: Family::Mlp,
                shapes: n
                    .widths
                    .windows(2)
                    .flat_map(|w| [vec![w[1], w[0]], vec![w[1]]])
                    .collect(),
                params,
                link: Some(Link::Logistic),
                variance: None,
            },
            Model::TwoMoment(r) => ModelRepr {
                family: Family::TwoMoment,
                shapes: vec![vec![r.w.len()]],
                params,
                link: None,
                variance: Some(r.c),
            },
        }
    }
}

impl TryFrom<ModelRepr> for Model {
    type Error = Error;
    fn try_from(r: ModelRepr) -> Result<Self> {
        let bad = |msg: &str| Error::Spec(format!("model: {msg}"));
        match r.family {
            Family::Linear => {
                let d = match r.shapes.as_slice() {
                    [w, b] if w.len() == 1 && b == &[1] => w[0],
                    _ => return Err(bad("linear shapes must be [[d],[1]]")),
                };
                if r.params.len() != d + 1 {
                    return Err(Error::Dimension {
                        expected: d + 1,
                        got: r.params.len(),
                    });
                }
                Ok(Model::Linear(LinearClassifier {
                    w: r.params[..d].to_vec(),
                    b: r.params[d],
                    link: r.link.unwrap_or_default(),
                }))
            }
            Family::Mlp => {
                if r.shapes.len() < 4 || !r.shapes.len().is_multiple_of(2) {
                    return Err(bad("mlp shapes must alternate [out,in],[out]"));
                }
                let mut widths = Vec::new();
                for pair in r.shapes.chunks(2) {
                    match (pair[0].as_slice(), pair[1].as_slice()) {
                        ([o, i], [ob]) if o == ob => {
                            if widths.is_empty() {
                                widths.push(*i);
                            } else if widths.last() != Some(i) {
                                return Err(bad("mlp layer widths do not chain"));
                            }
                            widths.push(*o);
                        }
                        _ => return Err(bad("mlp shapes must alternate [out,in],[out]")),
                    }
                }
                Ok(Model::Mlp(MlpClassifier::from_parts(widths, r.params)?))
            }
            Family::TwoMoment => {
                let d = match r.shapes.as_slice() {
                    [w] if w.len() == 1 => w[0],
                    _ => return Err(bad("two_moment shapes must be [[d]]")),
                };
                if r.params.len() != d {
                    return Err(Error::Dimension {
                        expected: d,
                        got: r.params.len(),
                    });
                }
                let c = r
                    .variance
                    .ok_or_else(|| bad("two_moment needs a variance"))?;
                if !(c > 0.0) {
                    return Err(bad("variance must be > 0"));
                }
                Ok(Model::TwoMoment(TwoMomentRegressor { w: r.params, c }))
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

impl Model {
    pub fn input_dim(&self) -> usize {
        match self {
            Model::Linear(l) => l.w.len(),
            Model::Mlp(n) => n.widths[0],
            Model::TwoMoment(r) => r.w.len(),
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, Model::TwoMoment(_))
    }

    pub fn num_params(&self) -> usize {
        match self {
            Model::Linear(l) => l.w.len() + 1,
            Model::Mlp(n) => n.params.len(),
            Model::TwoMoment(r) => r.w.len(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Model::Linear(l) => {
                let mut p = l.w.clone();
                p.push(l.b);
                p
            }
            Model::Mlp(n) => n.params.clone(),
            Model::TwoMoment(r) => r.w.clone(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::Dimension {
                expected: self.num_params(),
                got: p.len(),
            });
        }
        match self {
            Model::Linear(l) => {
                let d = l.w.len();
                l.w.copy_from_slice(&p[..d]);
                l.b = p[d];
            }
            Model::Mlp(n) => n.params.copy_from_slice(p),
            Model::TwoMoment(r) => r.w.copy_from_slice(p),
        }
        Ok(())
    }

    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Pre-link score of one row.
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.check_width(x)?;
        Ok(match self {
            Model::Linear(l) => dot(&l.w, x) + l.b,
            Model::Mlp(n) => n.logit(x),
            Model::TwoMoment(r) => dot(&r.w, x),
        })
    }

    pub fn logits<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<f64>> {
        rows.iter().map(|x| self.logit(x.as_ref())).collect()
    }

    /// Probabilities for classifiers, means for the regressor.
    pub fn forward<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<f64>> {
        let z = self.logits(rows)?;
        Ok(match self {
            Model::Linear(l) => z.into_iter().map(|z| l.link.apply(z)).collect(),
            Model::Mlp(_) => z.into_iter().map(sigmoid).collect(),
            Model::TwoMoment(_) => z,
        })
    }

    /// Adds `g * d logit(x) / d params` into `grad`.
    pub(crate) fn accumulate_logit_grad(&self, x: &[f64], g: f64, grad: &mut [f64]) {
        match self {
            Model::Linear(l) => {
                let d = l.w.len();
                for (gi, xi) in grad[..d].iter_mut().zip(x) {
                    *gi += g * xi;
                }
                grad[d] += g;
            }
            Model::Mlp(n) => n.backprop(x, g, grad),
            Model::TwoMoment(_) => {
                for (gi, xi) in grad.iter_mut().zip(x) {
                    *gi += g * xi;
                }
            }
        }
    }
}
