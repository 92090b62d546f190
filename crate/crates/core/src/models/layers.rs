use rand::Rng;
use wxadapt_autograd::{NodeId, Scalar, Tensor};

use super::params::{BnId, Ctx, ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// N(0, 2 / fan_in), for layers followed by ReLU.
    He,
    /// N(0, 1 / fan_in).
    Lecun,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let shape = vec![cout, cin, kernel, kernel];
        let w = match init {
            Init::He => Tensor::randn(shape, (2.0 / fan_in).sqrt(), rng),
            Init::Lecun => Tensor::randn(shape, (1.0 / fan_in).sqrt(), rng),
            Init::Zero => Tensor::zeros(shape),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        Conv { weight, bias, kernel }
    }

    /// Stride 1 with "same" padding.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        Ok(ctx.g.conv2d(x, w, b, 1, self.kernel / 2)?)
    }
}

/// Bias-free convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv::new(store, name, cin, cout, kernel, false, Init::He, rng);
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::full(vec![cout], T::one()));
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(vec![cout]));
        let state = store.add_bn(format!("{name}.bn"), cout);
        ConvBnRelu {
            conv,
            gamma,
            beta,
            state,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(ctx, x)?;
        let y = ctx.bn(y, self.gamma, self.beta, self.state)?;
        Ok(ctx.g.relu(y)?)
    }
}
