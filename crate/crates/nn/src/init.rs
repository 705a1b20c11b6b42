//! Variable storage with seeded initialization.
//!
//! candle's CPU device cannot be seeded, so fresh variables are drawn here
//! from a generator keyed on `(seed, variable name)`. A model therefore
//! initializes identically regardless of the order its layers are built in.

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use signfold_core::seed::rng_for;

pub struct SeededVarMap {
    map: VarMap,
    seed: u64,
}

impl SeededVarMap {
    pub fn new(map: VarMap, seed: u64) -> Self {
        Self { map, seed }
    }

    fn draw(&self, shape: &Shape, name: &str, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = rng_for(self.seed, &["init", name]);
        let normal = |rng: &mut rand_chacha::ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
            let d = Normal::new(mean, std.max(0.0)).expect("finite std");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        match init {
            Init::Const(v) => vec![v; n],
            Init::Randn { mean, stdev } => normal(&mut rng, mean, stdev),
            Init::Uniform { lo, up } => (0..n).map(|_| lo + (up - lo) * rng.random::<f64>()).collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = fan.for_shape(shape).max(1) as f64;
                let std = non_linearity.gain() / fan.sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(&mut rng, 0.0, std),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| bound * (2.0 * rng.random::<f64>() - 1.0)).collect()
                    }
                }
            }
        }
    }
}

impl SimpleBackend for SeededVarMap {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut data = self.map.data().lock().expect("var map lock poisoned");
        if let Some(var) = data.get(name) {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch on {name}: {s:?} <> {:?}", var.shape());
            }
            return Ok(var.as_tensor().clone());
        }
        let values = self.draw(&s, name, h);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_owned(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.map.data().lock().expect("var map lock poisoned").get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("variable {name} does not exist"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.map.data().lock().expect("var map lock poisoned").contains_key(name)
    }
}

/// A builder whose new variables land in `map`, drawn deterministically from `seed`.
pub fn seeded_builder(map: &VarMap, seed: u64, dtype: DType, device: &Device) -> VarBuilder<'static> {
    VarBuilder::from_backend(Box::new(SeededVarMap::new(map.clone(), seed)), dtype, device.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values_regardless_of_order() {
        let (a, b) = (VarMap::new(), VarMap::new());
        let va = seeded_builder(&a, 3, DType::F32, &Device::Cpu);
        let vb = seeded_builder(&b, 3, DType::F32, &Device::Cpu);
        let x1 = va.get_with_hints((4, 5), "x", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        let _y1 = va.get_with_hints(7, "y", Init::Uniform { lo: -1.0, up: 1.0 }).unwrap();
        let _y2 = vb.get_with_hints(7, "y", Init::Uniform { lo: -1.0, up: 1.0 }).unwrap();
        let x2 = vb.get_with_hints((4, 5), "x", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        assert_eq!(x1.to_vec2::<f32>().unwrap(), x2.to_vec2::<f32>().unwrap());
        let c = VarMap::new();
        let x3 = seeded_builder(&c, 4, DType::F32, &Device::Cpu)
            .get_with_hints((4, 5), "x", candle_nn::init::DEFAULT_KAIMING_NORMAL)
            .unwrap();
        assert_ne!(x1.to_vec2::<f32>().unwrap(), x3.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn variables_are_shared_with_the_map() {
        let m = VarMap::new();
        let vb = seeded_builder(&m, 1, DType::F32, &Device::Cpu);
        let t = vb.get_with_hints(3, "w", Init::Const(2.0)).unwrap();
        assert!(t.is_variable());
        assert_eq!(m.all_vars().len(), 1);
        assert_eq!(t.to_vec1::<f32>().unwrap(), vec![2.0; 3]);
    }
}
