//! SGD with heavy-ball momentum and weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::head::TemplateBank;
use crate::psmap::{ProjectionWeights, Role};
use crate::real::Real;

/// A named, shaped, contiguous parameter tensor.
#[derive(Debug)]
pub struct Block<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

#[derive(Debug)]
pub struct BlockMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

/// Parameter containers expose their tensors in a fixed order.
pub trait Params<T> {
    fn blocks(&self) -> Vec<Block<'_, T>>;
    fn blocks_mut(&mut self) -> Vec<BlockMut<'_, T>>;
}

fn role_tag(n_roles: usize, r: usize) -> &'static str {
    if n_roles == 1 {
        "shared"
    } else {
        Role::ALL[r].name()
    }
}

impl<T: Real> Params<T> for ProjectionWeights<T> {
    fn blocks(&self) -> Vec<Block<'_, T>> {
        let mut out = Vec::new();
        for (i, comp) in self.comps.iter().enumerate() {
            for (r, a) in comp.iter().enumerate() {
                let tag = role_tag(comp.len(), r);
                out.push(Block {
                    name: format!("proj.comp{i}.{tag}.weight"),
                    shape: a.weight.shape().to_vec(),
                    data: a.weight.as_slice().expect("contiguous"),
                });
                out.push(Block {
                    name: format!("proj.comp{i}.{tag}.bias"),
                    shape: a.bias.shape().to_vec(),
                    data: a.bias.as_slice().expect("contiguous"),
                });
            }
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_, T>> {
        let mut out = Vec::new();
        for (i, comp) in self.comps.iter_mut().enumerate() {
            let n = comp.len();
            for (r, a) in comp.iter_mut().enumerate() {
                let tag = role_tag(n, r);
                out.push(BlockMut {
                    name: format!("proj.comp{i}.{tag}.weight"),
                    shape: a.weight.shape().to_vec(),
                    data: a.weight.as_slice_mut().expect("contiguous"),
                });
                out.push(BlockMut {
                    name: format!("proj.comp{i}.{tag}.bias"),
                    shape: a.bias.shape().to_vec(),
                    data: a.bias.as_slice_mut().expect("contiguous"),
                });
            }
        }
        out
    }
}

impl<T: Real> Params<T> for TemplateBank<T> {
    fn blocks(&self) -> Vec<Block<'_, T>> {
        let mut out = Vec::new();
        for (i, c) in self.comps.iter().enumerate() {
            out.push(Block {
                name: format!("comp{i}.cls"),
                shape: c.cls.shape().to_vec(),
                data: c.cls.as_slice().expect("contiguous"),
            });
            out.push(Block {
                name: format!("comp{i}.reg"),
                shape: c.reg.shape().to_vec(),
                data: c.reg.as_slice().expect("contiguous"),
            });
            out.push(Block {
                name: format!("comp{i}.bias"),
                shape: c.bias.shape().to_vec(),
                data: c.bias.as_slice().expect("contiguous"),
            });
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_, T>> {
        let mut out = Vec::new();
        for (i, c) in self.comps.iter_mut().enumerate() {
            out.push(BlockMut {
                name: format!("comp{i}.cls"),
                shape: c.cls.shape().to_vec(),
                data: c.cls.as_slice_mut().expect("contiguous"),
            });
            out.push(BlockMut {
                name: format!("comp{i}.reg"),
                shape: c.reg.shape().to_vec(),
                data: c.reg.as_slice_mut().expect("contiguous"),
            });
            out.push(BlockMut {
                name: format!("comp{i}.bias"),
                shape: c.bias.shape().to_vec(),
                data: c.bias.as_slice_mut().expect("contiguous"),
            });
        }
        out
    }
}

impl<T, P: Params<T>> Params<T> for Option<P> {
    fn blocks(&self) -> Vec<Block<'_, T>> {
        self.as_ref().map_or_else(Vec::new, |p| p.blocks())
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_, T>> {
        self.as_mut().map_or_else(Vec::new, |p| p.blocks_mut())
    }
}

impl<T, P: Params<T>> Params<T> for &mut P {
    fn blocks(&self) -> Vec<Block<'_, T>> {
        (**self).blocks()
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_, T>> {
        (**self).blocks_mut()
    }
}

/// Concatenation of two parameter sets.
impl<T, A: Params<T>, B: Params<T>> Params<T> for (A, B) {
    fn blocks(&self) -> Vec<Block<'_, T>> {
        let mut out = self.0.blocks();
        out.extend(self.1.blocks());
        out
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_, T>> {
        let mut out = self.0.blocks_mut();
        out.extend(self.1.blocks_mut());
        out
    }
}

/// `acc += other`, block by block.
pub fn add_assign<T: Real, P: Params<T>, Q: Params<T>>(acc: &mut P, other: &Q) -> Result<()> {
    let src = other.blocks();
    let mut dst = acc.blocks_mut();
    if src.len() != dst.len() {
        return Err(Error::shape(dst.len(), src.len()));
    }
    for (d, s) in dst.iter_mut().zip(&src) {
        if d.data.len() != s.data.len() {
            return Err(Error::shape(format!("{} of {}", d.name, d.data.len()), s.data.len()));
        }
        for (a, &b) in d.data.iter_mut().zip(s.data) {
            *a += b;
        }
    }
    Ok(())
}

/// Momentum buffers and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub const MOMENTUM: f64 = 0.9;
    pub const WEIGHT_DECAY: f64 = 0.0005;

    pub fn new<P: Params<T>>(params: &P, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimState {
            lr,
            momentum,
            weight_decay,
            step: 0,
            velocity: params.blocks().iter().map(|b| vec![T::zero(); b.data.len()]).collect(),
        }
    }
}

/// `v <- mu*v - lr*(g + wd*theta)`, `theta <- theta + v`.
pub fn sgd_step<T: Real, P: Params<T>, G: Params<T>>(
    params: &mut P,
    grads: &G,
    state: &mut OptimState<T>,
) -> Result<()> {
    let grads = grads.blocks();
    let mut params = params.blocks_mut();
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(
            format!("{} parameter blocks", params.len()),
            format!("{} gradients / {} buffers", grads.len(), state.velocity.len()),
        ));
    }
    let (mu, lr, wd) = (T::of(state.momentum), T::of(state.lr), T::of(state.weight_decay));
    for ((p, g), v) in params.iter_mut().zip(&grads).zip(&mut state.velocity) {
        if p.data.len() != g.data.len() || p.data.len() != v.len() {
            return Err(Error::shape(
                format!("{} of {} values", p.name, p.data.len()),
                format!("{} of {} values", g.name, g.data.len()),
            ));
        }
        for ((theta, &grad), vel) in p.data.iter_mut().zip(g.data).zip(v.iter_mut()) {
            *vel = mu * *vel - lr * (grad + wd * *theta);
            *theta += *vel;
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psmap::{ARConfig, Tiling};
    use crate::rng::stream;

    fn cfg() -> ARConfig {
        ARConfig {
            tilings: vec![Tiling::new(1, 1)],
            k: 1,
            num_classes: 1,
            ..ARConfig::default()
        }
    }

    fn scalar_bank(theta: f64) -> TemplateBank<f64> {
        let mut b = TemplateBank::zeros(&cfg());
        b.comps[0].cls[[0, 0]] = theta;
        b
    }

    #[test]
    fn single_scalar_update() {
        let mut p = scalar_bank(1.0);
        let g = scalar_bank(1.0);
        let mut st = OptimState::new(&p, 0.1, 0.0, 0.0);
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert!((p.comps[0].cls[[0, 0]] - 0.9).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        let mut p = scalar_bank(2.0);
        let mut st = OptimState::new(&p, 0.1, 0.9, 0.0);
        st.velocity[0][0] = 1.0;
        sgd_step(&mut p, &scalar_bank(0.0), &mut st).unwrap();
        assert!((st.velocity[0][0] - 0.9).abs() < 1e-15);
        assert!((p.comps[0].cls[[0, 0]] - 2.9).abs() < 1e-15);

        let mut q = scalar_bank(2.0);
        let before = q.clone();
        let mut st = OptimState::new(&q, 0.1, 0.9, 0.0);
        sgd_step(&mut q, &scalar_bank(0.0), &mut st).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn two_momentum_steps_match_hand_unroll() {
        let (lr, mu, wd) = (0.05, 0.9, 0.0005);
        let mut p = scalar_bank(1.5);
        let mut st = OptimState::new(&p, lr, mu, wd);
        sgd_step(&mut p, &scalar_bank(0.4), &mut st).unwrap();
        sgd_step(&mut p, &scalar_bank(-0.2), &mut st).unwrap();
        let v1 = -lr * (0.4 + wd * 1.5);
        let t1 = 1.5 + v1;
        let v2 = mu * v1 - lr * (-0.2 + wd * t1);
        let t2 = t1 + v2;
        assert!((p.comps[0].cls[[0, 0]] - t2).abs() < 1e-9);
    }

    #[test]
    fn vanilla_descent_without_momentum_or_decay() {
        let c = ARConfig::default();
        let mut p = ProjectionWeights::<f64>::init(&c, 3, &mut stream(1, "p", 0));
        let g = ProjectionWeights::<f64>::init(&c, 3, &mut stream(2, "g", 0));
        let before = p.clone();
        let mut st = OptimState::new(&p, 0.25, 0.0, 0.0);
        sgd_step(&mut p, &g, &mut st).unwrap();
        for ((a, b), c) in p.blocks().iter().zip(before.blocks()).zip(g.blocks()) {
            for ((x, y), z) in a.data.iter().zip(b.data).zip(c.data) {
                assert_eq!(*x, y - 0.25 * z);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let c = ARConfig::default();
        let mut p = ProjectionWeights::<f64>::zeros(&c, 3);
        let g = ProjectionWeights::<f64>::zeros(&c, 4);
        let mut st = OptimState::new(&p, 0.1, 0.9, 0.0);
        assert!(sgd_step(&mut p, &g, &mut st).is_err());
    }

    #[test]
    fn composed_params_concatenate_blocks() {
        let c = cfg();
        let mut proj = ProjectionWeights::<f64>::zeros(&c, 2);
        let mut bank = scalar_bank(1.0);
        let mut both = (Some(&mut proj), &mut bank);
        let names: Vec<String> = both.blocks_mut().into_iter().map(|b| b.name).collect();
        assert_eq!(names[0], "proj.comp0.roi.weight");
        assert_eq!(names.last().unwrap(), "comp0.bias");
        let none: (Option<&mut ProjectionWeights<f64>>, &mut TemplateBank<f64>) = (None, &mut bank);
        assert_eq!(none.blocks().len(), 3);
        let mut acc = scalar_bank(1.0);
        add_assign(&mut acc, &scalar_bank(2.5)).unwrap();
        assert_eq!(acc.comps[0].cls[[0, 0]], 3.5);
    }

    #[test]
    fn block_names_follow_checkpoint_convention() {
        let bank = TemplateBank::<f32>::zeros(&cfg());
        let names: Vec<String> = bank.blocks().into_iter().map(|b| b.name).collect();
        assert_eq!(names, vec!["comp0.cls", "comp0.reg", "comp0.bias"]);
    }
}
