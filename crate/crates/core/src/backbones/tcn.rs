use rand_chacha::ChaCha8Rng;

use super::{Conv, ForwardCtx};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamId, ParamStore, Var};

/// `x + pointwise(relu(dilated_conv(x)))`, kernel 3, zero padding.
#[derive(Clone, Debug)]
pub struct DilatedResidualBlock {
    dilated: Conv,
    pointwise: Conv,
}

impl DilatedResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        maps: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dilation < 1 {
            return Err(Error::config("dilation must be at least 1"));
        }
        Ok(DilatedResidualBlock {
            dilated: Conv::new(store, &format!("{name}.dilated"), maps, maps, 3, dilation, 1.0, rng),
            pointwise: Conv::new(store, &format!("{name}.pointwise"), maps, maps, 1, 1, 1.0, rng),
        })
    }

    pub fn dilation(&self) -> usize {
        self.dilated.dilation
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.dilated.params(), self.pointwise.params()].concat()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.dilated.forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.pointwise.forward(g, store, h)?;
        let h = ctx.dropout(g, h)?;
        g.add(x, h)
    }

    /// Forward on a frozen block.
    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Result<Mat> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, store, xv, &mut ForwardCtx::eval())?;
        Ok(g.value(y).clone())
    }
}
