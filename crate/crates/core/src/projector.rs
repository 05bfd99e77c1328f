//! Two-layer GELU MLP mapping encoder outputs into the decoder embedding space:
//! `H_proj = W₂ · GELU(W₁ · H_v + b₁) + b₂`, applied row-wise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{normal_matrix, ParamSet, INIT_STD};
use crate::error::{Error, Result};
use crate::numkit::{self, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_llm: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            d_model: 8,
            d_hidden: 16,
            d_llm: 12,
        }
    }
}

impl ProjectorConfig {
    /// 1152 → 4304 → 3584.
    pub fn full_scale() -> Self {
        Self {
            d_model: 1152,
            d_hidden: 4304,
            d_llm: 3584,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams {
    /// (d_hidden × d_model)
    pub w1: Matrix,
    pub b1: Matrix,
    /// (d_llm × d_hidden)
    pub w2: Matrix,
    pub b2: Matrix,
}

impl ProjectorParams {
    pub fn init(config: &ProjectorConfig, seed: u64) -> Result<Self> {
        if config.d_model == 0 || config.d_hidden == 0 || config.d_llm == 0 {
            return Err(Error::Config(format!("projector dimensions must be positive: {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            w1: normal_matrix(&mut rng, config.d_hidden, config.d_model, INIT_STD),
            b1: Matrix::zeros(1, config.d_hidden),
            w2: normal_matrix(&mut rng, config.d_llm, config.d_hidden, INIT_STD),
            b2: Matrix::zeros(1, config.d_llm),
        })
    }

    pub fn d_model(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_llm(&self) -> usize {
        self.w2.rows()
    }

    fn check(&self) -> Result<()> {
        let (h, d) = self.w1.shape();
        let ok = self.b1.shape() == (1, h) && self.w2.cols() == h && self.b2.shape() == (1, self.w2.rows());
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "projector params",
                left: (h, d),
                right: self.w2.shape(),
            })
        }
    }

    pub fn bind(&self, g: &mut Graph) -> (ProjectorVars, Vec<Var>) {
        let vars = ProjectorVars {
            w1: g.leaf(self.w1.clone()),
            b1: g.leaf(self.b1.clone()),
            w2: g.leaf(self.w2.clone()),
            b2: g.leaf(self.b2.clone()),
        };
        (vars, vec![vars.w1, vars.b1, vars.w2, vars.b2])
    }
}

impl ParamSet for ProjectorParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("projector.w1".into(), &self.w1),
            ("projector.b1".into(), &self.b1),
            ("projector.w2".into(), &self.w2),
            ("projector.b2".into(), &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("projector.w1".into(), &mut self.w1),
            ("projector.b1".into(), &mut self.b1),
            ("projector.w2".into(), &mut self.w2),
            ("projector.b2".into(), &mut self.b2),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Projects every row of `h_v` (N × d_model) to N × d_llm.
pub fn project(h_v: &Matrix, params: &ProjectorParams) -> Result<Matrix> {
    params.check()?;
    let hidden = numkit::add_row_broadcast(&numkit::matmul_nt(h_v, &params.w1)?, &params.b1)?;
    let activated = hidden.map(numkit::gelu);
    numkit::add_row_broadcast(&numkit::matmul_nt(&activated, &params.w2)?, &params.b2)
}

pub fn project_graph(g: &mut Graph, h_v: Var, vars: &ProjectorVars) -> Result<Var> {
    let hidden = g.linear(h_v, vars.w1, vars.b1)?;
    let activated = g.gelu(hidden);
    g.linear(activated, vars.w2, vars.b2)
}
