//! Building blocks shared by the stage models.

use ndarray::Array3;
use pdac_nn::{ChaCha8Rng, ConvCfg, Graph, Init, ParamStore, Tensor, Var};

use crate::error::{Error, Result};

/// `[lead..., D, H, W]` tensor holding a copy of `data`.
pub(crate) fn array_tensor(data: &Array3<f32>, lead: &[usize]) -> Tensor {
    let mut shape = lead.to_vec();
    shape.extend_from_slice(data.shape());
    Tensor::new(shape, data.iter().copied().collect())
}

pub(crate) fn init_conv(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    kernel: [usize; 3],
    rng: &mut ChaCha8Rng,
) {
    let fan_in = cin * kernel.iter().product::<usize>();
    store.init(
        format!("{name}.w"),
        &[cout, cin, kernel[0], kernel[1], kernel[2]],
        Init::HeNormal { fan_in },
        rng,
    );
    store.init(format!("{name}.b"), &[cout], Init::Zeros, rng);
}

pub(crate) fn init_linear(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (inp as f32).sqrt();
    store.init(format!("{name}.w"), &[out, inp], Init::Uniform { bound }, rng);
    store.init(format!("{name}.b"), &[out], Init::Zeros, rng);
}

pub(crate) fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, cfg: ConvCfg) -> Var {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    g.conv(x, w, Some(b), cfg)
}

pub(crate) fn conv_relu(g: &mut Graph, store: &ParamStore, name: &str, x: Var, cfg: ConvCfg) -> Var {
    let y = conv(g, store, name, x, cfg);
    g.relu(y)
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    g.linear(x, w, Some(b))
}

/// Copies every tensor of `source` into `target`, requiring matching names and shapes.
pub(crate) fn copy_matching(target: &mut ParamStore, source: &ParamStore) -> Result<Vec<String>> {
    for (name, tensor) in source.iter() {
        let slot = target.get(name).ok_or_else(|| Error::Transfer {
            tensor: name.to_string(),
            reason: "not present in the receiving model".into(),
        })?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Transfer {
                tensor: name.to_string(),
                reason: format!("shape {:?} does not match expected {:?}", tensor.shape(), slot.shape()),
            });
        }
    }
    Ok(source
        .iter()
        .map(|(name, tensor)| {
            target.insert(name, tensor.clone());
            name.to_string()
        })
        .collect())
}

/// Maps windowed intensities from `[0, 1]` to `[-1, 1]`. With all-positive
/// inputs, first-layer units whose kernels sum negative never activate.
pub(crate) fn centred(g: &mut Graph, x: Var) -> Var {
    let shifted = g.add_scalar(x, -0.5);
    g.scale(shifted, 2.0)
}
