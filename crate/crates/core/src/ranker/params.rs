//! Parameter tensors of the ranker and their initialisation.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RankerConfig;

/// Affine map `x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear { w: Array2::zeros((fan_in, fan_out)), b: Array1::zeros(fan_out) }
    }

    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut lin = Linear::zeros(fan_in, fan_out);
        uniform(&mut lin.w, fan_in, rng);
        lin
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    fn new(dim: usize, gain: f64) -> Self {
        LayerNorm { gain: Array1::from_elem(dim, gain), bias: Array1::zeros(dim) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

/// Every learned tensor. Also used, zero-filled, for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerParams {
    pub proj_h: Linear,
    pub proj_a: Linear,
    pub layers: Vec<EncoderLayer>,
    pub cross_q: Linear,
    pub cross_k: Linear,
    pub cross_v: Linear,
    pub cross_o: Linear,
    /// First pair-MLP layer split into its step half and its candidate half.
    pub mlp_w1_step: Array2<f64>,
    pub mlp_w1_cand: Array2<f64>,
    pub mlp_b1: Array1<f64>,
    pub mlp_w2: Array1<f64>,
    pub mlp_b2: Array1<f64>,
}

fn uniform<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>, fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    a.map_inplace(|x| *x = rng.random_range(-bound..bound));
}

impl RankerParams {
    fn build(config: &RankerConfig, mut rng: Option<&mut ChaCha8Rng>) -> Self {
        let (d, dm, hid) = (config.input_dim, config.d_model, config.mlp_hidden);
        let gain = if rng.is_some() { 1.0 } else { 0.0 };
        let mut lin = |i: usize, o: usize| match rng.as_deref_mut() {
            Some(r) => Linear::init(i, o, r),
            None => Linear::zeros(i, o),
        };
        let proj_h = lin(d, dm);
        let proj_a = lin(d, dm);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer {
                q: lin(dm, dm),
                k: lin(dm, dm),
                v: lin(dm, dm),
                o: lin(dm, dm),
                ln1: LayerNorm::new(dm, gain),
                ff1: lin(dm, 4 * dm),
                ff2: lin(4 * dm, dm),
                ln2: LayerNorm::new(dm, gain),
            })
            .collect();
        let cross_q = lin(dm, dm);
        let cross_k = lin(dm, dm);
        let cross_v = lin(dm, dm);
        let cross_o = lin(dm, dm);
        let mut params = RankerParams {
            proj_h,
            proj_a,
            layers,
            cross_q,
            cross_k,
            cross_v,
            cross_o,
            mlp_w1_step: Array2::zeros((dm, hid)),
            mlp_w1_cand: Array2::zeros((dm, hid)),
            mlp_b1: Array1::zeros(hid),
            mlp_w2: Array1::zeros(hid),
            mlp_b2: Array1::zeros(1),
        };
        if let Some(r) = rng {
            uniform(&mut params.mlp_w1_step, 2 * dm, r);
            uniform(&mut params.mlp_w1_cand, 2 * dm, r);
            uniform(&mut params.mlp_w2, hid, r);
        }
        params
    }

    /// Seeded initialisation: uniform `±1/√fan_in` weights, zero biases, unit gains.
    pub fn init(config: &RankerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Some(&mut rng))
    }

    /// All-zero tensors with the shapes `config` implies.
    pub fn zeros(config: &RankerConfig) -> Self {
        Self::build(config, None)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named tensors with their shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        fn push2<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: String, a: &'a Array2<f64>) {
            out.push((name, a.shape().to_vec(), a.as_slice().expect("standard layout")));
        }
        fn push1<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: String, a: &'a Array1<f64>) {
            out.push((name, a.shape().to_vec(), a.as_slice().expect("standard layout")));
        }
        fn linear<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: &str, l: &'a Linear) {
            push2(out, format!("{name}.w"), &l.w);
            push1(out, format!("{name}.b"), &l.b);
        }
        linear(&mut out, "proj_h", &self.proj_h);
        linear(&mut out, "proj_a", &self.proj_a);
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("enc{i}");
            linear(&mut out, &format!("{p}.attn_q"), &layer.q);
            linear(&mut out, &format!("{p}.attn_k"), &layer.k);
            linear(&mut out, &format!("{p}.attn_v"), &layer.v);
            linear(&mut out, &format!("{p}.attn_o"), &layer.o);
            push1(&mut out, format!("{p}.ln1.gain"), &layer.ln1.gain);
            push1(&mut out, format!("{p}.ln1.bias"), &layer.ln1.bias);
            linear(&mut out, &format!("{p}.ff1"), &layer.ff1);
            linear(&mut out, &format!("{p}.ff2"), &layer.ff2);
            push1(&mut out, format!("{p}.ln2.gain"), &layer.ln2.gain);
            push1(&mut out, format!("{p}.ln2.bias"), &layer.ln2.bias);
        }
        linear(&mut out, "cross_q", &self.cross_q);
        linear(&mut out, "cross_k", &self.cross_k);
        linear(&mut out, "cross_v", &self.cross_v);
        linear(&mut out, "cross_o", &self.cross_o);
        push2(&mut out, "mlp.w1_step".into(), &self.mlp_w1_step);
        push2(&mut out, "mlp.w1_cand".into(), &self.mlp_w1_cand);
        push1(&mut out, "mlp.b1".into(), &self.mlp_b1);
        push1(&mut out, "mlp.w2".into(), &self.mlp_w2);
        push1(&mut out, "mlp.b2".into(), &self.mlp_b2);
        out
    }

    /// Mutable views in the same order as [`RankerParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let names: Vec<String> = self.tensors().into_iter().map(|(n, _, _)| n).collect();
        let mut slices: Vec<&mut [f64]> = Vec::with_capacity(names.len());
        fn lin<'a>(out: &mut Vec<&'a mut [f64]>, l: &'a mut Linear) {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        let RankerParams {
            proj_h,
            proj_a,
            layers,
            cross_q,
            cross_k,
            cross_v,
            cross_o,
            mlp_w1_step,
            mlp_w1_cand,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        } = self;
        lin(&mut slices, proj_h);
        lin(&mut slices, proj_a);
        for layer in layers.iter_mut() {
            lin(&mut slices, &mut layer.q);
            lin(&mut slices, &mut layer.k);
            lin(&mut slices, &mut layer.v);
            lin(&mut slices, &mut layer.o);
            slices.push(layer.ln1.gain.as_slice_mut().unwrap());
            slices.push(layer.ln1.bias.as_slice_mut().unwrap());
            lin(&mut slices, &mut layer.ff1);
            lin(&mut slices, &mut layer.ff2);
            slices.push(layer.ln2.gain.as_slice_mut().unwrap());
            slices.push(layer.ln2.bias.as_slice_mut().unwrap());
        }
        lin(&mut slices, cross_q);
        lin(&mut slices, cross_k);
        lin(&mut slices, cross_v);
        lin(&mut slices, cross_o);
        slices.push(mlp_w1_step.as_slice_mut().unwrap());
        slices.push(mlp_w1_cand.as_slice_mut().unwrap());
        slices.push(mlp_b1.as_slice_mut().unwrap());
        slices.push(mlp_w2.as_slice_mut().unwrap());
        slices.push(mlp_b2.as_slice_mut().unwrap());
        names.into_iter().zip(slices).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Copy with every value rounded through `f32`, matching what a checkpoint stores.
    pub fn rounded_f32(&self) -> Self {
        let mut p = self.clone();
        for (_, t) in p.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        p
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|x| x.is_finite()))
    }
}
