use rand_chacha::ChaCha8Rng;

use super::{Conv, ForwardCtx};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};

/// Gain applied to the fan-in bound of the attention projections.
const ATTENTION_GAIN: f64 = 0.5;

/// One attention layer:
///
/// ```text
/// h   = relu(dilated_conv(x))
/// n   = instance_norm(h)
/// a   = out_proj(relu(local_attention(q(n), k(n), v(cross or n))))
/// out = x + pointwise(alpha * a + h)
/// ```
///
/// Attention blocks have length equal to the layer's dilation, so a query
/// sees a window of twice that length.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    feed_forward: Conv,
    query: Conv,
    key: Conv,
    value: Conv,
    att_out: Conv,
    pointwise: Conv,
    block: usize,
    alpha: f64,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        maps: usize,
        dilation: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dilation < 1 {
            return Err(Error::config("dilation must be at least 1"));
        }
        let qk = (maps / 2).max(1);
        let v = (maps / 2).max(1);
        Ok(AttentionBlock {
            feed_forward: Conv::new(store, &format!("{name}.ff"), maps, maps, 3, dilation, 1.0, rng),
            query: Conv::new(store, &format!("{name}.query"), maps, qk, 1, 1, ATTENTION_GAIN, rng),
            key: Conv::new(store, &format!("{name}.key"), maps, qk, 1, 1, ATTENTION_GAIN, rng),
            value: Conv::new(store, &format!("{name}.value"), maps, v, 1, 1, ATTENTION_GAIN, rng),
            att_out: Conv::new(store, &format!("{name}.att_out"), v, maps, 1, 1, ATTENTION_GAIN, rng),
            pointwise: Conv::new(store, &format!("{name}.pointwise"), maps, maps, 1, 1, 1.0, rng),
            block: dilation,
            alpha,
        })
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            self.feed_forward.params(),
            self.query.params(),
            self.key.params(),
            self.value.params(),
            self.att_out.params(),
            self.pointwise.params(),
        ]
        .concat()
    }

    /// Returns the layer output and the raw attention node (before the output projection).
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        cross: Option<Var>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Var)> {
        let h = self.feed_forward.forward(g, store, x)?;
        let h = g.relu(h);
        let n = g.instance_norm(h);
        let q = self.query.forward(g, store, n)?;
        let k = self.key.forward(g, store, n)?;
        let v = self.value.forward(g, store, cross.unwrap_or(n))?;
        let att = g.local_attention(q, k, v, self.block)?;
        let a = g.relu(att);
        let a = self.att_out.forward(g, store, a)?;
        let a = g.scale(a, self.alpha);
        let mixed = g.add(a, h)?;
        let out = self.pointwise.forward(g, store, mixed)?;
        let out = ctx.dropout(g, out)?;
        Ok((g.add(x, out)?, att))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        cross: Option<Var>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        Ok(self.forward_traced(g, store, x, cross, ctx)?.0)
    }
}
