//! Single-layer bidirectional GRU.
//!
//! Cell, with row-vector inputs:
//!
//! ```text
//! z  = sigmoid(x·W_z + h·U_z + b_z)
//! r  = sigmoid(x·W_r + h·U_r + b_r)
//! h~ = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
//! h' = (1 - z) ⊙ h + z ⊙ h~
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamKey, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Parameter handles for one direction.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: ParamKey,
    pub u_z: ParamKey,
    pub b_z: ParamKey,
    pub w_r: ParamKey,
    pub u_r: ParamKey,
    pub b_r: ParamKey,
    pub w_h: ParamKey,
    pub u_h: ParamKey,
    pub b_h: ParamKey,
}

impl GruParams {
    fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut mat = |name: &str, rows: usize, fan_in: usize, rng: &mut R| {
            store.add_uniform(format!("{prefix}.{name}"), &[rows, hidden], fan_in, rng)
        };
        Self {
            w_z: mat("w_z", d_in, d_in, rng),
            u_z: mat("u_z", hidden, hidden, rng),
            b_z: mat("b_z", 1, hidden, rng),
            w_r: mat("w_r", d_in, d_in, rng),
            u_r: mat("u_r", hidden, hidden, rng),
            b_r: mat("b_r", 1, hidden, rng),
            w_h: mat("w_h", d_in, d_in, rng),
            u_h: mat("u_h", hidden, hidden, rng),
            b_h: mat("b_h", 1, hidden, rng),
        }
    }

    fn keys(&self) -> [ParamKey; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h,
            self.b_h,
        ]
    }
}

/// Input projections `x·W + b` for the three gates.
struct Projected {
    z: Var,
    r: Var,
    h: Var,
}

#[derive(Clone, Debug)]
pub struct BiGru {
    d_in: usize,
    hidden: usize,
    forward: GruParams,
    backward: GruParams,
}

impl BiGru {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_in == 0 || hidden == 0 {
            return Err(Error::config("GRU dimensions must be positive"));
        }
        let forward = GruParams::new(store, &format!("{prefix}.fwd"), d_in, hidden, rng);
        let backward = GruParams::new(store, &format!("{prefix}.bwd"), d_in, hidden, rng);
        Ok(Self {
            d_in,
            hidden,
            forward,
            backward,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.d_in
    }

    pub fn params(&self, dir: Direction) -> &GruParams {
        match dir {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }

    /// Every parameter key of both directions.
    pub fn keys(&self) -> Vec<ParamKey> {
        self.forward
            .keys()
            .into_iter()
            .chain(self.backward.keys())
            .collect()
    }

    fn project(&self, g: &mut Graph, bound: &Bound, p: &GruParams, x: Var) -> Result<Projected> {
        let mut one = |w: ParamKey, b: ParamKey| -> Result<Var> {
            let xw = g.matmul(x, bound.get(w))?;
            g.add_row(xw, bound.get(b))
        };
        Ok(Projected {
            z: one(p.w_z, p.b_z)?,
            r: one(p.w_r, p.b_r)?,
            h: one(p.w_h, p.b_h)?,
        })
    }

    fn step(
        &self,
        g: &mut Graph,
        bound: &Bound,
        p: &GruParams,
        h_prev: Var,
        x: &Projected,
    ) -> Result<Var> {
        let hz = g.matmul(h_prev, bound.get(p.u_z))?;
        let z_pre = g.add(x.z, hz)?;
        let z = g.sigmoid(z_pre)?;
        let hr = g.matmul(h_prev, bound.get(p.u_r))?;
        let r_pre = g.add(x.r, hr)?;
        let r = g.sigmoid(r_pre)?;
        let rh = g.mul(r, h_prev)?;
        let rhu = g.matmul(rh, bound.get(p.u_h))?;
        let cand_pre = g.add(x.h, rhu)?;
        let cand = g.tanh(cand_pre)?;
        // (1 - z) ⊙ h + z ⊙ h~  ==  h + z ⊙ (h~ - h)
        let diff = g.sub(cand, h_prev)?;
        let upd = g.mul(z, diff)?;
        g.add(h_prev, upd)
    }

    /// One GRU step on `[1×h]` state and `[1×d_in]` input.
    pub fn cell(
        &self,
        g: &mut Graph,
        bound: &Bound,
        dir: Direction,
        h_prev: Var,
        x: Var,
    ) -> Result<Var> {
        if g.shape(h_prev) != [1, self.hidden] || g.shape(x) != [1, self.d_in] {
            return Err(Error::dim(format!(
                "GRU cell expects h [1x{}] and x [1x{}], got {:?} and {:?}",
                self.hidden,
                self.d_in,
                g.shape(h_prev),
                g.shape(x)
            )));
        }
        let p = self.params(dir).clone();
        let proj = self.project(g, bound, &p, x)?;
        self.step(g, bound, &p, h_prev, &proj)
    }

    /// `[N×d_in] -> [N×2h]`; row `i` is `[h_fwd_i, h_bwd_i]`, both directions
    /// starting from zero state.
    pub fn encode(&self, g: &mut Graph, bound: &Bound, v: Var) -> Result<Var> {
        let (n, d) = g.value(v).dims2()?;
        if d != self.d_in {
            return Err(Error::dim(format!(
                "GRU input width {d} does not match {}",
                self.d_in
            )));
        }
        let run = |g: &mut Graph, p: &GruParams, order: Vec<usize>| -> Result<Vec<Var>> {
            let all = self.project(g, bound, p, v)?;
            let mut h = g.constant(Tensor::zeros(&[1, self.hidden]));
            let mut states = vec![h; n];
            for t in order {
                let x = Projected {
                    z: g.slice_rows(all.z, t, 1)?,
                    r: g.slice_rows(all.r, t, 1)?,
                    h: g.slice_rows(all.h, t, 1)?,
                };
                h = self.step(g, bound, p, h, &x)?;
                states[t] = h;
            }
            Ok(states)
        };
        let fwd = run(g, &self.forward, (0..n).collect())?;
        let bwd = run(g, &self.backward, (0..n).rev().collect())?;
        let fwd = g.concat_rows(&fwd)?;
        let bwd = g.concat_rows(&bwd)?;
        g.concat_cols(&[fwd, bwd])
    }
}
