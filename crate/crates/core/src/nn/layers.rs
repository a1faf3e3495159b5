//! Parameterized building blocks recorded onto a [`Graph`].

use super::graph::{Graph, NodeId};
use super::ops::ConvGeom;
use super::params::{ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Real;
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut impl Rng,
    ) -> Self {
        let k = geom.kernel;
        let w = ps.add_he(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng);
        let b = ps.add_zeros(format!("{name}.bias"), &[cout]);
        Self { w, b, geom }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        g.conv2d(x, self.w, Some(self.b), self.geom)
    }

    pub fn apply_relu<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let y = self.apply(g, x);
        g.relu(y)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add_he(format!("{name}.weight"), &[n_out, n_in], n_in, rng);
        let b = ps.add_zeros(format!("{name}.bias"), &[n_out]);
        Self { w, b }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        g.linear(x, self.w, self.b)
    }
}

/// Overwrite every tensor of `fresh` from `loaded`, failing on any missing
/// or misshapen entry.
pub fn restore_all<T: Real>(fresh: &mut ParamSet<T>, loaded: &ParamSet<T>) -> Result<()> {
    let copied = fresh.load_matching(loaded);
    if copied != fresh.len() {
        let missing: Vec<&str> = fresh
            .iter()
            .filter(|(_, name, t)| loaded.find(name).map(|j| loaded.get(j).shape() != t.shape()).unwrap_or(true))
            .map(|(_, name, _)| name)
            .collect();
        return Err(Error::Checkpoint(format!(
            "checkpoint lacks or misshapes {} tensors: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(())
}
