use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};

use super::layers::{
    maxpool2, maxpool2_backward, relu, relu_backward, upsample2, upsample2_backward, Act, BatchNorm,
    Conv,
};
use crate::datamodel::{is_buffer_key, ParamSnapshot};
use crate::meanteacher::{ModelAdapter, ModelMode};
use crate::{CbmtError, Result, Scalar};

/// Conv → BatchNorm → ReLU.
#[derive(Clone, Debug)]
struct Block<F> {
    conv: Conv<F>,
    bn: BatchNorm<F>,
    out: Option<Act<F>>,
}

impl<F: Scalar> Block<F> {
    fn new(cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv::new(cin, cout, 3, false),
            bn: BatchNorm::new(cout),
            out: None,
        }
    }

    fn forward(&mut self, x: &Act<F>, train: bool, record: bool) -> Act<F> {
        let y = self.conv.forward(x, record);
        let mut z = self.bn.forward(&y, train, record);
        relu(&mut z);
        self.out = record.then(|| z.clone());
        z
    }

    fn backward(&mut self, mut dy: Act<F>, need_input_grad: bool) -> Option<Act<F>> {
        let out = self.out.take().expect("block backward without recorded forward");
        relu_backward(&mut dy, &out);
        let d = self.bn.backward(&dy);
        self.conv.backward(&d, need_input_grad)
    }
}

const ENC1: usize = 0;
const ENC2: usize = 1;
const ENC3: usize = 2;
const BOTT1: usize = 3;
const BOTT2: usize = 4;
const DEC3: usize = 5;
const DEC2: usize = 6;
const DEC1: usize = 7;
const BLOCK_NAMES: [&str; 8] = [
    "enc1", "enc2", "enc3", "bott1", "bott2", "dec3", "dec2", "dec1",
];

/// Three-level encoder-decoder with additive skip connections and a 1×1
/// head producing one logit per class.
///
/// Only the first encoder block and the head run at full resolution.
///
/// Input height and width must be multiples of 8.
#[derive(Clone, Debug)]
pub struct SegNet<F> {
    widths: [usize; 4],
    num_classes: usize,
    blocks: Vec<Block<F>>,
    head: Conv<F>,
    mode: ModelMode,
    pool_args: Option<[Vec<u8>; 3]>,
}

impl<F: Scalar> SegNet<F> {
    /// Builds the network with He-normal weights drawn from `seed`.
    pub fn new(widths: [usize; 4], num_classes: usize, seed: u64) -> Self {
        let [w0, w1, w2, w3] = widths;
        let blocks = vec![
            Block::new(3, w0),
            Block::new(w0, w1),
            Block::new(w1, w2),
            Block::new(w2, w3),
            Block::new(w3, w3),
            Block::new(w3, w2),
            Block::new(w2, w1),
            Block::new(w1, w0),
        ];
        let mut net = Self {
            widths,
            num_classes,
            blocks,
            head: Conv::new(w0, num_classes, 1, true),
            mode: ModelMode::Train,
            pool_args: None,
        };
        let mut rng = crate::rng::rng_from(seed);
        for b in &mut net.blocks {
            let fan_in = b.conv.weight.ncols() as f64;
            let d = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            b.conv.weight.mapv_inplace(|_| F::lit(d.sample(&mut rng)));
        }
        let d = Normal::new(0.0, (1.0 / w0 as f64).sqrt()).expect("valid std");
        net.head.weight.mapv_inplace(|_| F::lit(d.sample(&mut rng)));
        net
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn num_trainable(&self) -> usize {
        self.read_params()
            .entries
            .iter()
            .filter(|(k, _)| !is_buffer_key(k))
            .map(|(_, v)| v.len())
            .sum()
    }

    fn forward_act(&mut self, x: &Act<F>, record: bool) -> Act<F> {
        let train = self.mode == ModelMode::Train;
        let b = &mut self.blocks;
        let e1 = b[ENC1].forward(x, train, record);
        let (p1, a1) = maxpool2(&e1);
        let e2 = b[ENC2].forward(&p1, train, record);
        let (p2, a2) = maxpool2(&e2);
        let e3 = b[ENC3].forward(&p2, train, record);
        let (p3, a3) = maxpool2(&e3);
        let b1 = b[BOTT1].forward(&p3, train, record);
        let b2 = b[BOTT2].forward(&b1, train, record);
        let d3 = b[DEC3].forward(&b2, train, record);
        let mut u3 = upsample2(&d3);
        u3.data += &e3.data;
        let d2 = b[DEC2].forward(&u3, train, record);
        let mut u2 = upsample2(&d2);
        u2.data += &e2.data;
        let d1 = b[DEC1].forward(&u2, train, record);
        let mut u1 = upsample2(&d1);
        u1.data += &e1.data;
        self.pool_args = record.then_some([a1, a2, a3]);
        self.head.forward(&u1, record)
    }

    fn backward_act(&mut self, dlogits: &Act<F>) {
        let [a1, a2, a3] = self.pool_args.take().expect("backward without recorded forward");
        let du1 = self.head.backward(dlogits, true).expect("input grad");
        let b = &mut self.blocks;
        let du2 = b[DEC1].backward(upsample2_backward(&du1), true).expect("input grad");
        let du3 = b[DEC2].backward(upsample2_backward(&du2), true).expect("input grad");
        let db2 = b[DEC3].backward(upsample2_backward(&du3), true).expect("input grad");
        let db1 = b[BOTT2].backward(db2, true).expect("input grad");
        let dp3 = b[BOTT1].backward(db1, true).expect("input grad");
        let mut de3 = maxpool2_backward(&dp3, &a3);
        de3.data += &du3.data;
        let dp2 = b[ENC3].backward(de3, true).expect("input grad");
        let mut de2 = maxpool2_backward(&dp2, &a2);
        de2.data += &du2.data;
        let dp1 = b[ENC2].backward(de2, true).expect("input grad");
        let mut de1 = maxpool2_backward(&dp1, &a1);
        de1.data += &du1.data;
        b[ENC1].backward(de1, false);
    }

    /// Visits every parameter slot as (name, shape, value, gradient).
    fn visit(&self, mut f: impl FnMut(String, Vec<usize>, &[F], Option<&[F]>)) {
        let sl = |a: &ndarray::Array1<F>| a.as_slice().expect("contiguous").to_vec();
        for (name, b) in BLOCK_NAMES.iter().zip(&self.blocks) {
            let c = &b.conv;
            let shape = vec![c.weight.nrows(), c.cin(), c.k, c.k];
            f(
                format!("{name}.conv.weight"),
                shape,
                c.weight.as_slice().expect("contiguous"),
                Some(c.grad_weight.as_slice().expect("contiguous")),
            );
            let bn = &b.bn;
            let n = vec![bn.gamma.len()];
            f(format!("{name}.bn.gamma"), n.clone(), &sl(&bn.gamma), Some(&sl(&bn.grad_gamma)));
            f(format!("{name}.bn.beta"), n.clone(), &sl(&bn.beta), Some(&sl(&bn.grad_beta)));
            f(format!("{name}.bn.running_mean"), n.clone(), &sl(&bn.running_mean), None);
            f(format!("{name}.bn.running_var"), n, &sl(&bn.running_var), None);
        }
        let h = &self.head;
        f(
            "head.weight".into(),
            vec![h.weight.nrows(), h.cin(), 1, 1],
            h.weight.as_slice().expect("contiguous"),
            Some(h.grad_weight.as_slice().expect("contiguous")),
        );
        let bias = h.bias.as_ref().expect("head bias");
        let gbias = h.grad_bias.as_ref().expect("head bias grad");
        f("head.bias".into(), vec![bias.len()], &sl(bias), Some(&sl(gbias)));
    }

    fn slot_mut(&mut self, key: &str) -> Option<&mut [F]> {
        if let Some(rest) = key.strip_prefix("head.") {
            return match rest {
                "weight" => self.head.weight.as_slice_mut(),
                "bias" => self.head.bias.as_mut().and_then(|b| b.as_slice_mut()),
                _ => None,
            };
        }
        let (block, field) = key.split_once('.')?;
        let i = BLOCK_NAMES.iter().position(|n| *n == block)?;
        let b = &mut self.blocks[i];
        match field {
            "conv.weight" => b.conv.weight.as_slice_mut(),
            "bn.gamma" => b.bn.gamma.as_slice_mut(),
            "bn.beta" => b.bn.beta.as_slice_mut(),
            "bn.running_mean" => b.bn.running_mean.as_slice_mut(),
            "bn.running_var" => b.bn.running_var.as_slice_mut(),
            _ => None,
        }
    }
}

impl<F: Scalar> ModelAdapter<F> for SegNet<F> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn mode(&self) -> ModelMode {
        self.mode
    }

    fn set_mode(&mut self, mode: ModelMode) {
        self.mode = mode;
    }

    fn forward(&mut self, batch: &[&Array3<F>]) -> Result<Vec<Array3<F>>> {
        let Some(first) = batch.first() else {
            return Err(CbmtError::Empty("batch".into()));
        };
        let (c, h, w) = first.dim();
        if c != 3 || h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(CbmtError::Shape(format!(
                "input {c}x{h}x{w}: need 3 channels and sides that are multiples of 8"
            )));
        }
        if batch.iter().any(|x| x.dim() != (c, h, w)) {
            return Err(CbmtError::Shape("batch items differ in size".into()));
        }
        let x = Act::from_batch(batch);
        let record = self.mode == ModelMode::Train;
        Ok(self.forward_act(&x, record).to_batch())
    }

    fn backward(&mut self, grad_logits: &[Array3<F>]) -> Result<()> {
        if self.pool_args.is_none() {
            return Err(CbmtError::InvalidArgument(
                "backward requires a train-mode forward".into(),
            ));
        }
        let refs: Vec<&Array3<F>> = grad_logits.iter().collect();
        let d = Act::from_batch(&refs);
        self.backward_act(&d);
        Ok(())
    }

    fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.conv.zero_grad();
            b.bn.zero_grad();
        }
        self.head.zero_grad();
    }

    fn read_params(&self) -> ParamSnapshot<F> {
        let mut entries = BTreeMap::new();
        self.visit(|name, shape, value, _| {
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), value.to_vec()).expect("shape matches");
            entries.insert(name, arr);
        });
        ParamSnapshot::new(entries, 0)
    }

    fn gradients(&self) -> ParamSnapshot<F> {
        let mut entries = BTreeMap::new();
        self.visit(|name, shape, _, grad| {
            if let Some(g) = grad {
                let arr = ArrayD::from_shape_vec(IxDyn(&shape), g.to_vec()).expect("shape matches");
                entries.insert(name, arr);
            }
        });
        ParamSnapshot::new(entries, 0)
    }

    fn write_params(&mut self, snap: &ParamSnapshot<F>) -> Result<()> {
        self.read_params().check_compatible(snap)?;
        for (k, v) in &snap.entries {
            let dst = self.slot_mut(k).ok_or_else(|| CbmtError::ParamMismatch {
                missing: vec![],
                unexpected: vec![k.clone()],
                reshaped: vec![],
            })?;
            for (d, s) in dst.iter_mut().zip(v.iter()) {
                *d = *s;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng as _;

    fn net() -> SegNet<f64> {
        SegNet::new([2, 3, 4, 5], 2, 11)
    }

    fn image(seed: u64) -> Array3<f64> {
        let mut rng = crate::rng::rng_from(seed);
        Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn default_widths_are_about_100k_params() {
        let n = SegNet::<f32>::new([8, 16, 32, 64], 2, 0).num_trainable();
        assert!((80_000..120_000).contains(&n), "{n}");
    }

    #[test]
    fn write_then_read_is_exact() {
        let mut a = net();
        let mut s = net().read_params();
        for v in s.entries.values_mut() {
            v.mapv_inplace(|x| x * 0.5 + 0.25);
        }
        a.write_params(&s).unwrap();
        assert_eq!(a.read_params(), s);
    }

    #[test]
    fn key_set_is_stable() {
        let a: Vec<String> = net().read_params().entries.into_keys().collect();
        let b: Vec<String> = SegNet::<f64>::new([2, 3, 4, 5], 2, 99).read_params().entries.into_keys().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m = net();
        m.set_mode(ModelMode::Eval);
        let x = image(1);
        let a = m.forward(&[&x]).unwrap();
        let b = m.forward(&[&x]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_input_size() {
        let mut m = net();
        let x = Array3::<f64>::zeros((3, 6, 8));
        assert!(m.forward(&[&x]).is_err());
    }

    /// Finite-difference check of the full backward pass in train mode.
    #[test]
    fn gradients_match_finite_differences() {
        let x1 = image(2);
        let x2 = image(3);
        let mut rng = crate::rng::rng_from(5);
        let probe: Vec<Array3<f64>> = (0..2)
            .map(|_| Array3::from_shape_fn((2, 8, 8), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let objective = |m: &mut SegNet<f64>| -> f64 {
            let out = m.forward(&[&x1, &x2]).unwrap();
            out.iter().zip(&probe).map(|(o, p)| (o * p).sum()).sum()
        };
        let mut m = net();
        let base = m.read_params();
        objective(&mut m);
        m.zero_grad();
        m.backward(&probe).unwrap();
        let grads = m.gradients();

        let h = 1e-5;
        for (key, g) in &grads.entries {
            for idx in [0usize, g.len() / 2, g.len() - 1] {
                let mut plus = base.clone();
                plus.entries.get_mut(key).unwrap().as_slice_mut().unwrap()[idx] += h;
                let mut minus = base.clone();
                minus.entries.get_mut(key).unwrap().as_slice_mut().unwrap()[idx] -= h;
                let mut mp = net();
                mp.write_params(&plus).unwrap();
                let fp = objective(&mut mp);
                let mut mm = net();
                mm.write_params(&minus).unwrap();
                let fm = objective(&mut mm);
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = g.as_slice().unwrap()[idx];
                assert_relative_eq!(analytic, numeric, epsilon = 1e-6, max_relative = 1e-4);
            }
        }
    }
}
