//! Reverse-mode tape over (C, H, W) feature maps and small vectors.
//!
//! Each forward op pushes a value plus a backward closure. A graph is
//! built per image per step and discarded; parameters live in `Params`
//! and enter the graph as leaves that remember their origin, so the
//! backward pass can fold gradients straight back into the store.

use crate::kernels;
use crate::nn::{ParamId, Params};
use ndarray::{Array1, Array3, ArrayD, Axis, Ix1, Ix3, Ix4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub usize);

type BackFn = Box<dyn Fn(&ArrayD<f32>, &Graph, &mut Grads)>;

pub struct Grads {
    slots: Vec<Option<ArrayD<f32>>>,
}

impl Grads {
    pub fn add(&mut self, id: VarId, g: ArrayD<f32>) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    pub fn get(&self, id: VarId) -> Option<&ArrayD<f32>> {
        self.slots[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    vals: Vec<ArrayD<f32>>,
    backs: Vec<Option<BackFn>>,
    param_of: Vec<Option<ParamId>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: VarId) -> &ArrayD<f32> {
        &self.vals[id.0]
    }

    pub fn map(&self, id: VarId) -> ndarray::ArrayView3<'_, f32> {
        self.vals[id.0].view().into_dimensionality::<Ix3>().unwrap()
    }

    pub fn vec(&self, id: VarId) -> ndarray::ArrayView1<'_, f32> {
        self.vals[id.0].view().into_dimensionality::<Ix1>().unwrap()
    }

    fn push(&mut self, v: ArrayD<f32>, back: Option<BackFn>) -> VarId {
        let id = VarId(self.vals.len());
        self.vals.push(v);
        self.backs.push(back);
        self.param_of.push(None);
        id
    }

    pub fn leaf(&mut self, v: ArrayD<f32>) -> VarId {
        self.push(v, None)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> VarId {
        self.push(ArrayD::zeros(ndarray::IxDyn(shape)), None)
    }

    /// Leaf whose gradient is folded back into the parameter store.
    pub fn param(&mut self, params: &Params, pid: ParamId) -> VarId {
        let id = self.push(params.get(pid).clone(), None);
        self.param_of[id.0] = Some(pid);
        id
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.vals[a.0] + &self.vals[b.0];
        self.push(
            v,
            Some(Box::new(move |g, _, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
        )
    }

    pub fn add_n(&mut self, ids: &[VarId]) -> VarId {
        assert!(!ids.is_empty());
        let mut v = self.vals[ids[0].0].clone();
        for id in &ids[1..] {
            v += &self.vals[id.0];
        }
        let ids = ids.to_vec();
        self.push(
            v,
            Some(Box::new(move |g, _, sink| {
                for id in &ids {
                    sink.add(*id, g.clone());
                }
            })),
        )
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = self.vals[x.0].mapv(|a| a.max(0.0));
        let out = VarId(self.vals.len());
        self.push(
            v,
            Some(Box::new(move |g, graph, sink| {
                let y = &graph.vals[out.0];
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(y).for_each(|gv, &yv| {
                    if yv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                sink.add(x, gx);
            })),
        )
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> VarId {
        let xm = self.map(x).to_owned();
        let wm = self.vals[w.0]
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let bm = b.map(|bid| {
            self.vals[bid.0]
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned()
        });
        let v = kernels::conv2d_fwd(&xm, &wm, bm.as_ref(), stride, dilation, groups);
        let x_dim = xm.dim();
        let w_dim = wm.dim();
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, graph, sink| {
                let go = g.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let wv = graph.vals[w.0]
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let xv = graph.map(x).to_owned();
                sink.add(
                    x,
                    kernels::conv2d_bwd_x(&go, &wv, x_dim, stride, dilation, groups).into_dyn(),
                );
                sink.add(
                    w,
                    kernels::conv2d_bwd_w(&go, &xv, w_dim, stride, dilation, groups).into_dyn(),
                );
                if let Some(bid) = b {
                    sink.add(bid, kernels::conv2d_bwd_b(&go).into_dyn());
                }
            })),
        )
    }

    pub fn upsample2x(&mut self, x: VarId) -> VarId {
        let v = kernels::upsample2x_fwd(&self.map(x).to_owned());
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, _, sink| {
                let go = g.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                sink.add(x, kernels::upsample2x_bwd(&go).into_dyn());
            })),
        )
    }

    /// Concatenate maps along the channel axis.
    pub fn concat_ch(&mut self, ids: &[VarId]) -> VarId {
        let views: Vec<_> = ids.iter().map(|id| self.map(*id)).collect();
        let v = ndarray::concatenate(Axis(0), &views).unwrap();
        let widths: Vec<usize> = ids.iter().map(|id| self.map(*id).dim().0).collect();
        let ids = ids.to_vec();
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, _, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut off = 0;
                for (id, w) in ids.iter().zip(&widths) {
                    let part = g3.slice(ndarray::s![off..off + w, .., ..]).to_owned();
                    sink.add(*id, part.into_dyn());
                    off += w;
                }
            })),
        )
    }

    pub fn slice_ch(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let xm = self.map(x);
        let (c, h, w) = xm.dim();
        assert!(start + len <= c);
        let v = xm.slice(ndarray::s![start..start + len, .., ..]).to_owned();
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, _, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut gx = Array3::<f32>::zeros((c, h, w));
                gx.slice_mut(ndarray::s![start..start + len, .., ..])
                    .assign(&g3);
                sink.add(x, gx.into_dyn());
            })),
        )
    }

    /// out[c] = x[perm[c]]; backward scatters through the inverse permutation.
    pub fn permute_ch(&mut self, x: VarId, perm: Vec<usize>) -> VarId {
        let xm = self.map(x);
        let (c, h, w) = xm.dim();
        assert_eq!(perm.len(), c);
        let mut v = Array3::<f32>::zeros((c, h, w));
        for (o, &p) in perm.iter().enumerate() {
            v.index_axis_mut(Axis(0), o)
                .assign(&xm.index_axis(Axis(0), p));
        }
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, _, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut gx = Array3::<f32>::zeros((c, h, w));
                for (o, &p) in perm.iter().enumerate() {
                    gx.index_axis_mut(Axis(0), p)
                        .assign(&g3.index_axis(Axis(0), o));
                }
                sink.add(x, gx.into_dyn());
            })),
        )
    }

    /// Softmax over a 1-D vector.
    pub fn softmax(&mut self, x: VarId) -> VarId {
        let xv = self.vec(x);
        let m = xv.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let ex = xv.mapv(|a| (a - m).exp());
        let s = ex.sum();
        let y = ex / s;
        let out = VarId(self.vals.len());
        self.push(
            y.into_dyn(),
            Some(Box::new(move |g, graph, sink| {
                let y = graph.vec(out).to_owned();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let dot = (&g1 * &y).sum();
                let gx = &y * &(&g1.to_owned() - dot);
                sink.add(x, gx.into_dyn());
            })),
        )
    }

    /// Multiply a map by element `idx` of a 1-D vector variable.
    pub fn pick_scale(&mut self, x: VarId, wvec: VarId, idx: usize) -> VarId {
        let s = self.vec(wvec)[idx];
        let v = &self.vals[x.0] * s;
        self.push(
            v,
            Some(Box::new(move |g, graph, sink| {
                let s = graph.vec(wvec)[idx];
                sink.add(x, g * s);
                let xv = &graph.vals[x.0];
                let dot: f32 = g.iter().zip(xv.iter()).map(|(a, b)| a * b).sum();
                let n = graph.vec(wvec).len();
                let mut gw = Array1::<f32>::zeros(n);
                gw[idx] = dot;
                sink.add(wvec, gw.into_dyn());
            })),
        )
    }

    /// Reverse sweep from the given seed gradients.
    pub fn backward(&self, seeds: Vec<(VarId, ArrayD<f32>)>) -> Grads {
        let mut grads = Grads {
            slots: vec![None; self.vals.len()],
        };
        for (id, g) in seeds {
            grads.add(id, g);
        }
        for i in (0..self.vals.len()).rev() {
            if let Some(back) = &self.backs[i] {
                if let Some(g) = grads.slots[i].take() {
                    back(&g, self, &mut grads);
                    grads.slots[i] = Some(g);
                }
            }
        }
        grads
    }

    /// Backward plus accumulation of parameter-leaf gradients into the store.
    pub fn backward_params(&self, seeds: Vec<(VarId, ArrayD<f32>)>, params: &mut Params) -> Grads {
        let grads = self.backward(seeds);
        self.fold_param_grads(&grads, params);
        grads
    }

    pub fn fold_param_grads(&self, grads: &Grads, params: &mut Params) {
        for (i, pid) in self.param_of.iter().enumerate() {
            if let (Some(pid), Some(g)) = (pid, &grads.slots[i]) {
                params.accumulate_grad(*pid, g);
            }
        }
    }

    /// Collect parameter gradients without touching a shared store. Used by
    /// per-image parallel workers; results are summed deterministically by
    /// the caller.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, ArrayD<f32>)> {
        self.param_of
            .iter()
            .enumerate()
            .filter_map(|(i, pid)| {
                pid.and_then(|p| grads.slots[i].clone().map(|g| (p, g)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};

    #[test]
    fn softmax_sums_to_one_and_backprops() {
        let mut g = Graph::new();
        let x = g.leaf(arr1(&[0.3f32, -1.0, 2.0]).into_dyn());
        let y = g.softmax(x);
        let s: f32 = g.vec(y).sum();
        assert!((s - 1.0).abs() < 1e-6);
        let grads = g.backward(vec![(y, arr1(&[1.0f32, 0.0, 0.0]).into_dyn())]);
        let gx = grads.get(x).unwrap();
        // rows of softmax jacobian sum to zero
        assert!(gx.sum().abs() < 1e-6);
    }

    #[test]
    fn pick_scale_grad_matches_fd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let xv: ArrayD<f32> =
            Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0..1.0f32)).into_dyn();
        let wv = arr1(&[0.7f32, -0.2]).into_dyn();
        let mut g = Graph::new();
        let x = g.leaf(xv.clone());
        let w = g.leaf(wv.clone());
        let y = g.pick_scale(x, w, 1);
        let ones = ArrayD::ones(g.value(y).raw_dim());
        let grads = g.backward(vec![(y, ones)]);
        let gw = grads.get(w).unwrap();
        assert!((gw[[1]] - xv.sum()).abs() < 1e-5);
        assert_eq!(gw[[0]], 0.0);
        let gx = grads.get(x).unwrap();
        assert!((gx[[0, 0, 0]] - (-0.2)).abs() < 1e-6);
    }

    #[test]
    fn concat_slice_roundtrip_grads() {
        let mut g = Graph::new();
        let a = g.leaf(Array3::<f32>::ones((2, 2, 2)).into_dyn());
        let b = g.leaf(Array3::<f32>::zeros((3, 2, 2)).into_dyn());
        let c = g.concat_ch(&[a, b]);
        assert_eq!(g.map(c).dim(), (5, 2, 2));
        let s = g.slice_ch(c, 1, 3);
        let ones = ArrayD::ones(g.value(s).raw_dim());
        let grads = g.backward(vec![(s, ones)]);
        let ga = grads.get(a).unwrap();
        assert_eq!(ga[[0, 0, 0]], 0.0);
        assert_eq!(ga[[1, 0, 0]], 1.0);
        let gb = grads.get(b).unwrap();
        assert_eq!(gb[[2, 0, 0]], 0.0);
        assert_eq!(gb[[1, 0, 0]], 1.0);
    }

    #[test]
    fn permute_inverts_in_backward() {
        let mut g = Graph::new();
        let x = g.leaf(
            Array3::from_shape_fn((3, 1, 1), |(c, _, _)| c as f32).into_dyn(),
        );
        let y = g.permute_ch(x, vec![2, 0, 1]);
        assert_eq!(g.map(y)[[0, 0, 0]], 2.0);
        let mut seed = Array3::<f32>::zeros((3, 1, 1));
        seed[[0, 0, 0]] = 5.0;
        let grads = g.backward(vec![(y, seed.into_dyn())]);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx[[2, 0, 0]], 5.0);
        assert_eq!(gx[[0, 0, 0]], 0.0);
    }

    #[test]
    fn composite_fd_check_through_conv_relu() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x0: ArrayD<f32> =
            Array3::from_shape_fn((2, 4, 4), |_| rng.gen_range(-1.0..1.0f32)).into_dyn();
        let w0: ArrayD<f32> = crate::nn::conv_init(&mut rng, 2, 2, 3);
        let f = |xv: &ArrayD<f32>, wv: &ArrayD<f32>| -> f32 {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone());
            let w = g.leaf(wv.clone());
            let c = g.conv2d(x, w, None, 1, 1, 1);
            let r = g.relu(c);
            g.value(r).sum()
        };
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let w = g.leaf(w0.clone());
        let c = g.conv2d(x, w, None, 1, 1, 1);
        let r = g.relu(c);
        let ones = ArrayD::ones(g.value(r).raw_dim());
        let grads = g.backward(vec![(r, ones)]);
        let gw = grads.get(w).unwrap();
        let h = 1e-3;
        for i in [0usize, 5, 11, 17] {
            let mut wp = w0.clone();
            let mut wm = w0.clone();
            wp.as_slice_mut().unwrap()[i] += h;
            wm.as_slice_mut().unwrap()[i] -= h;
            let fd = (f(&x0, &wp) - f(&x0, &wm)) / (2.0 * h);
            let an = gw.as_slice().unwrap()[i];
            assert!((fd - an).abs() < 2e-2, "i={i} fd={fd} an={an}");
        }
    }
}
