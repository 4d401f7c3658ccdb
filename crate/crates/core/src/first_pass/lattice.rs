//! Transducer loss: forward-backward over the `T' x (U + 1)` alignment lattice.

use crate::error::{Error, Result};
use crate::numerics::{log_add, Graph, Tensor, Var};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Log-domain lattice for one utterance. `blank(t, u)` and `emit(t, u)`
/// give the log-probability of a blank, respectively of symbol `y_{u+1}`,
/// at cell `(t, u)`.
#[derive(Debug, Clone)]
pub struct TransducerLattice {
    frames: usize,
    labels: usize,
    blank: Vec<f64>,
    emit: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl TransducerLattice {
    /// `log_probs` has one row per cell, row `t * (U + 1) + u`, and one
    /// column per output class with blank at column 0.
    pub fn new(log_probs: &Tensor, labels: &[u32], frames: usize) -> Result<Self> {
        let u_len = labels.len();
        if frames == 0 {
            return Err(Error::InvalidLattice(format!(
                "{u_len} labels but no encoder frames"
            )));
        }
        if log_probs.rows() != frames * (u_len + 1) {
            return Err(Error::shape(
                "transducer_loss",
                format!(
                    "{} lattice rows for T'={frames}, U={u_len}",
                    log_probs.rows()
                ),
            ));
        }
        let classes = log_probs.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y == 0 || y as usize >= classes) {
            return Err(Error::Vocab {
                id: bad,
                size: classes as u32 - 1,
            });
        }
        let cells = frames * (u_len + 1);
        let mut blank = vec![0.0; cells];
        let mut emit = vec![NEG_INF; cells];
        for t in 0..frames {
            for u in 0..=u_len {
                let i = t * (u_len + 1) + u;
                blank[i] = log_probs.get(i, 0);
                if u < u_len {
                    emit[i] = log_probs.get(i, labels[u] as usize);
                }
            }
        }
        let mut lattice = Self {
            frames,
            labels: u_len,
            blank,
            emit,
            alpha: vec![NEG_INF; cells],
            beta: vec![NEG_INF; cells],
        };
        lattice.forward();
        lattice.backward();
        Ok(lattice)
    }

    fn idx(&self, t: usize, u: usize) -> usize {
        t * (self.labels + 1) + u
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn blank(&self, t: usize, u: usize) -> f64 {
        self.blank[self.idx(t, u)]
    }

    pub fn emit(&self, t: usize, u: usize) -> f64 {
        self.emit[self.idx(t, u)]
    }

    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[self.idx(t, u)]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[self.idx(t, u)]
    }

    fn forward(&mut self) {
        for t in 0..self.frames {
            for u in 0..=self.labels {
                let a = if t == 0 && u == 0 {
                    0.0
                } else {
                    let from_blank = if t > 0 {
                        self.alpha(t - 1, u) + self.blank(t - 1, u)
                    } else {
                        NEG_INF
                    };
                    let from_emit = if u > 0 {
                        self.alpha(t, u - 1) + self.emit(t, u - 1)
                    } else {
                        NEG_INF
                    };
                    log_add(from_blank, from_emit)
                };
                let i = self.idx(t, u);
                self.alpha[i] = a;
            }
        }
    }

    fn backward(&mut self) {
        let (last_t, last_u) = (self.frames - 1, self.labels);
        for t in (0..self.frames).rev() {
            for u in (0..=self.labels).rev() {
                let b = if t == last_t && u == last_u {
                    self.blank(t, u)
                } else {
                    let via_blank = if t < last_t {
                        self.beta(t + 1, u) + self.blank(t, u)
                    } else {
                        NEG_INF
                    };
                    let via_emit = if u < last_u {
                        self.beta(t, u + 1) + self.emit(t, u)
                    } else {
                        NEG_INF
                    };
                    log_add(via_blank, via_emit)
                };
                let i = self.idx(t, u);
                self.beta[i] = b;
            }
        }
    }

    /// `log P(y | x) = alpha(T'-1, U) + blank(T'-1, U)`.
    pub fn log_likelihood(&self) -> f64 {
        let (t, u) = (self.frames - 1, self.labels);
        self.alpha(t, u) + self.blank(t, u)
    }

    /// Same quantity read off the backward table.
    pub fn log_likelihood_backward(&self) -> f64 {
        self.beta(0, 0)
    }

    /// Gradient of the negative log-likelihood with respect to the
    /// per-cell log-probabilities (same layout as the constructor input).
    pub fn nll_grad(&self, classes: usize, labels: &[u32]) -> Tensor {
        let ll = self.log_likelihood();
        let u_len = self.labels;
        let mut grad = Tensor::zeros(self.frames * (u_len + 1), classes);
        for t in 0..self.frames {
            for u in 0..=u_len {
                let i = self.idx(t, u);
                let next_blank = if t + 1 < self.frames {
                    self.beta(t + 1, u)
                } else if u == u_len {
                    0.0
                } else {
                    NEG_INF
                };
                let occ = self.alpha[i] + self.blank[i] + next_blank - ll;
                grad.set(i, 0, -occ.exp());
                if u < u_len {
                    let occ = self.alpha[i] + self.emit[i] + self.beta(t, u + 1) - ll;
                    grad.set(i, labels[u] as usize, -occ.exp());
                }
            }
        }
        grad
    }
}

/// Records `-log P(y | x)` on the graph from per-cell log-probabilities
/// `log_probs [(T' (U+1)) x classes]`.
pub fn transducer_nll(g: &mut Graph, log_probs: Var, labels: &[u32], frames: usize) -> Result<Var> {
    let lp = g.value(log_probs);
    let lattice = TransducerLattice::new(lp, labels, frames)?;
    let nll = -lattice.log_likelihood();
    let grad = lattice.nll_grad(lp.cols(), labels);
    g.scalar_with_grad(log_probs, nll, grad)
}
