//! Parameter storage, the shared U-Net backbone, and the optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Graph, Scalar, Tensor, Var};
use crate::error::{Result, TuskError};

/// A named trainable tensor.
#[derive(Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub requires_grad: bool,
}

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of uniquely named parameters.
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TuskError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id.0);
        self.params.push(Parameter {
            name,
            value,
            requires_grad: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TuskError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Clone into another precision (used by f64 gradient checks).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let data: Vec<U> = p.value.data().iter().map(|x| U::from_f64(x.to_f64())).collect();
            out.add(p.name.clone(), Tensor::new(p.value.shape().to_vec(), data).unwrap())
                .unwrap();
        }
        out
    }
}

/// Graph bindings for the whole store: one `Var` per parameter, inserted as
/// `param` (trainable) or `input` (frozen) by the predicate.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Bind pre-inserted graph vars, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars { vars }
    }
}

pub fn bind_params<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    trainable: impl Fn(&str) -> bool,
) -> ParamVars {
    let vars = store
        .iter()
        .map(|(_, p)| {
            if p.requires_grad && trainable(&p.name) {
                g.param(p.value.clone())
            } else {
                g.input(p.value.clone())
            }
        })
        .collect();
    ParamVars { vars }
}

/// Leaky-ReLU slope used throughout the backbone.
pub const LEAK: f64 = 0.1;

#[derive(Clone, Copy)]
struct ConvP {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

/// U-Net sizing. Spatial dims are preserved end to end; inputs must be
/// divisible by `2^depth`.
#[derive(Clone, Debug)]
pub struct UNetConfig {
    pub prefix: String,
    pub in_ch: usize,
    pub base: usize,
    pub depth: usize,
    /// (name, channels) pairs, each a linear 1x1 projection off the full-res
    /// trunk.
    pub heads: Vec<(String, usize)>,
    /// Stem kernel size (3, or 1 for smooth inputs like splat maps).
    pub stem_kernel: usize,
    /// Run the top (full-resolution) up level with 1x1 convs; spatial mixing
    /// at full res then happens only in the stem and the skip. Much cheaper
    /// on narrow trunks.
    pub full_res_1x1: bool,
}

impl UNetConfig {
    pub fn new(prefix: &str, in_ch: usize, base: usize, depth: usize) -> Self {
        UNetConfig {
            prefix: prefix.into(),
            in_ch,
            base,
            depth,
            heads: Vec::new(),
            stem_kernel: 3,
            full_res_1x1: false,
        }
    }
}

pub struct UNet {
    stem: ConvP,
    downs: Vec<(ConvP, ConvP)>,
    ups: Vec<(ConvP, ConvP)>,
    heads: Vec<ConvP>,
    pub depth: usize,
}

fn init_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConvP> {
    let fan_in = (kh * kw * cin) as f64;
    let gain = (2.0 / (1.0 + LEAK * LEAK)).sqrt();
    let bound = gain * (3.0 / fan_in).sqrt();
    let data: Vec<T> = (0..kh * kw * cin * cout)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    let w = store.add(format!("{name}.w"), Tensor::new(vec![kh, kw, cin, cout], data)?)?;
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?;
    Ok(ConvP { w, b, stride, pad })
}

impl UNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &UNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let p = &cfg.prefix;
        let sk = cfg.stem_kernel;
        let stem = init_conv(store, &format!("{p}.stem"), sk, sk, cfg.in_ch, cfg.base, 1, sk / 2, rng)?;
        let mut downs = Vec::new();
        for d in 0..cfg.depth {
            let cin = cfg.base << d;
            let cout = cfg.base << (d + 1);
            let down = init_conv(store, &format!("{p}.down{d}"), 3, 3, cin, cout, 2, 1, rng)?;
            let refine = init_conv(store, &format!("{p}.refine{d}"), 3, 3, cout, cout, 1, 1, rng)?;
            downs.push((down, refine));
        }
        let mut ups = Vec::new();
        for d in (0..cfg.depth).rev() {
            let cin = cfg.base << (d + 1);
            let cout = cfg.base << d;
            let k = if d == 0 && cfg.full_res_1x1 { 1 } else { 3 };
            let up = init_conv(store, &format!("{p}.up{d}"), k, k, cin, cout, 1, k / 2, rng)?;
            let fuse =
                init_conv(store, &format!("{p}.fuse{d}"), k, k, 2 * cout, cout, 1, k / 2, rng)?;
            ups.push((up, fuse));
        }
        let mut heads = Vec::new();
        for (hname, hch) in &cfg.heads {
            heads.push(init_conv(
                store,
                &format!("{p}.head_{hname}"),
                1,
                1,
                cfg.base,
                *hch,
                1,
                0,
                rng,
            )?);
        }
        Ok(UNet {
            stem,
            downs,
            ups,
            heads,
            depth: cfg.depth,
        })
    }

    fn conv<T: Scalar>(&self, g: &mut Graph<T>, vars: &ParamVars, c: &ConvP, x: Var) -> Result<Var> {
        g.conv2d(x, vars.var(c.w), vars.var(c.b), c.stride, c.pad)
    }

    /// Run the backbone; returns one output per configured head, in order.
    /// Head outputs are linear (no activation).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        image: Var,
    ) -> Result<Vec<Var>> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 3 {
            return Err(TuskError::ShapeMismatch {
                op: "unet_forward",
                lhs: shape,
                rhs: vec![0, 0, 0],
            });
        }
        let div = 1 << self.depth;
        if shape[0] % div != 0 || shape[1] % div != 0 {
            return Err(TuskError::ShapeMismatch {
                op: "unet_spatial",
                lhs: shape,
                rhs: vec![div, div],
            });
        }
        let mut x = self.conv(g, vars, &self.stem, image)?;
        x = g.leaky_relu(x, LEAK);
        let mut skips = Vec::with_capacity(self.depth);
        for (down, refine) in &self.downs {
            skips.push(x);
            x = self.conv(g, vars, down, x)?;
            x = g.leaky_relu(x, LEAK);
            x = self.conv(g, vars, refine, x)?;
            x = g.leaky_relu(x, LEAK);
        }
        for (i, (up, fuse)) in self.ups.iter().enumerate() {
            x = g.upsample2x(x)?;
            x = self.conv(g, vars, up, x)?;
            x = g.leaky_relu(x, LEAK);
            let skip = skips[self.depth - 1 - i];
            x = g.concat_last(x, skip)?;
            x = self.conv(g, vars, fuse, x)?;
            x = g.leaky_relu(x, LEAK);
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            outs.push(self.conv(g, vars, h, x)?);
        }
        Ok(outs)
    }
}

/// Adam with per-parameter moments and update counts. Parameter groups that
/// step at different cadences (encoder/decoder vs prototypes) keep their own
/// bias correction automatically.
pub struct Adam<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            m,
            v,
            t: vec![0; store.len()],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        updates: &[(ParamId, Tensor<T>)],
        lr: f64,
    ) {
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::ONE;
        let eps = T::from_f64(self.eps);
        for (id, grad) in updates {
            let i = id.0;
            self.t[i] += 1;
            let t = self.t[i];
            let bc1 = T::from_f64(1.0 - self.beta1.powi(t as i32));
            let bc2 = T::from_f64(1.0 - self.beta2.powi(t as i32));
            let lr_t = T::from_f64(lr);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.params[i].value.data_mut();
            for ((pw, (mw, vw)), &gw) in p
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(grad.data().iter())
            {
                *mw = b1 * *mw + (one - b1) * gw;
                *vw = b2 * *vw + (one - b2) * gw * gw;
                let mhat = *mw / bc1;
                let vhat = *vw / bc2;
                *pw -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment tensors for checkpointing, in store order.
    pub fn state(&self) -> (&[Tensor<T>], &[Tensor<T>], &[u64]) {
        (&self.m, &self.v, &self.t)
    }

    pub fn restore(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, t: Vec<u64>) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(store.add("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn unet_preserves_spatial_dims() {
        let mut store = ParamStore::<f32>::new();
        let cfg = UNetConfig {
            heads: vec![("heat".into(), 1), ("feat".into(), 8)],
            ..UNetConfig::new("enc", 3, 4, 2)
        };
        let mut r = rng::derive(0, "init", &[]);
        let net = UNet::new(&mut store, &cfg, &mut r).unwrap();
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &store, |_| true);
        let img = g.input(Tensor::zeros(&[16, 12, 3]));
        let outs = net.forward(&mut g, &vars, img).unwrap();
        assert_eq!(g.value(outs[0]).shape(), &[16, 12, 1]);
        assert_eq!(g.value(outs[1]).shape(), &[16, 12, 8]);
    }

    #[test]
    fn unet_rejects_indivisible_input() {
        let mut store = ParamStore::<f32>::new();
        let cfg = UNetConfig {
            heads: vec![("heat".into(), 1)],
            ..UNetConfig::new("enc", 3, 4, 2)
        };
        let mut r = rng::derive(0, "init", &[]);
        let net = UNet::new(&mut store, &cfg, &mut r).unwrap();
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &store, |_| true);
        let img = g.input(Tensor::zeros(&[15, 16, 3]));
        assert!(net.forward(&mut g, &vars, img).is_err());
    }

    #[test]
    fn adam_zero_lr_leaves_params_unchanged() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::full(&[3], 1.5)).unwrap();
        let mut adam = Adam::new(&store);
        let before = store.value(id).clone();
        adam.step(&mut store, &[(id, Tensor::full(&[3], 0.7))], 0.0);
        assert_eq!(before.data(), store.value(id).data());
    }
}
