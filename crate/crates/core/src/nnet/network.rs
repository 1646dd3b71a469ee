use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::{real, Dense, ModelParams, Real, LOCAL_FEATURES};
use crate::error::{Error, Result};
use crate::geom::PointCloud;

/// Per-point class scores, `N x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T = f32> {
    pub values: Array2<T>,
}

impl<T: Real> Logits<T> {
    pub fn new(values: Array2<T>) -> Self {
        Self { values }
    }

    pub fn num_points(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    /// Row-wise log-softmax, stabilized by the row maximum.
    pub fn log_softmax(&self) -> Array2<T> {
        let mut out = self.values.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b).ln() + max;
            row.mapv_inplace(|v| v - lse);
        }
        out
    }

    pub fn softmax(&self) -> Array2<T> {
        self.log_softmax().mapv(T::exp)
    }

    /// Highest-scoring class per point (lowest class id on ties).
    pub fn argmax(&self) -> Vec<usize> {
        self.values
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Intermediate values kept for the backward pass.
pub(crate) struct Activations<T> {
    x: Array2<T>,
    t1: Array2<T>,
    t2: Array2<T>,
    t2_arg: Vec<usize>,
    tg: Array1<T>,
    t3: Array1<T>,
    /// Input transform, `3 x 3`; points are transformed as row vectors `x A`.
    pub a: Array2<T>,
    xt: Array2<T>,
    h1: Array2<T>,
    h2: Array2<T>,
    h3: Array2<T>,
    h3_arg: Vec<usize>,
    g: Array1<T>,
    s: Array2<T>,
    pub logits: Array2<T>,
}

pub(crate) fn positions_matrix<T: Real>(cloud: &PointCloud) -> Array2<T> {
    let pts = cloud.positions();
    Array2::from_shape_fn((pts.len(), 3), |(i, k)| real(pts[i][k] as f64))
}

fn affine<T: Real>(x: &ArrayView2<T>, layer: &Dense<T>) -> Array2<T> {
    let mut y = x.dot(&layer.w);
    y += &layer.b;
    y
}

fn affine_vec<T: Real>(x: &Array1<T>, layer: &Dense<T>) -> Array1<T> {
    x.dot(&layer.w) + &layer.b
}

/// ELU activation, `x` for positive inputs and `e^x - 1` otherwise.
#[inline]
fn elu_scalar<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v.exp_m1()
    }
}

/// ELU derivative expressed through the activation output `y`.
#[inline]
fn elu_slope<T: Real>(y: T) -> T {
    if y > T::zero() {
        T::one()
    } else {
        y + T::one()
    }
}

fn elu<T: Real>(mut x: Array2<T>) -> Array2<T> {
    x.mapv_inplace(elu_scalar);
    x
}

fn elu_vec<T: Real>(mut x: Array1<T>) -> Array1<T> {
    x.mapv_inplace(elu_scalar);
    x
}

/// Column-wise max over points; ties resolve to the first point.
fn max_pool<T: Real>(x: &Array2<T>) -> (Array1<T>, Vec<usize>) {
    let mut arg = vec![0usize; x.ncols()];
    let mut best = x.row(0).to_owned();
    for (i, row) in x.rows().into_iter().enumerate().skip(1) {
        for (c, &v) in row.iter().enumerate() {
            if v > best[c] {
                best[c] = v;
                arg[c] = i;
            }
        }
    }
    (best, arg)
}

fn elu_back<T: Real>(d: &mut Array2<T>, y: &Array2<T>) {
    Zip::from(d).and(y).for_each(|d, &y| *d = *d * elu_slope(y));
}

fn elu_back_vec<T: Real>(d: &mut Array1<T>, y: &Array1<T>) {
    Zip::from(d).and(y).for_each(|d, &y| *d = *d * elu_slope(y));
}

fn outer<T: Real>(a: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

pub(crate) fn forward_cached<T: Real>(params: &ModelParams<T>, x: Array2<T>) -> Activations<T> {
    let [tc1, tc2, tf1, tf2] = &params.tnet;
    let t1 = elu(affine(&x.view(), tc1));
    let t2 = elu(affine(&t1.view(), tc2));
    let (tg, t2_arg) = max_pool(&t2);
    let t3 = elu_vec(affine_vec(&tg, tf1));
    let a_flat = affine_vec(&t3, tf2);
    let mut a = Array2::from_shape_vec((3, 3), a_flat.to_vec()).expect("9 outputs");
    for k in 0..3 {
        a[[k, k]] = a[[k, k]] + T::one();
    }
    let xt = x.dot(&a);

    let [c1, c2, c3] = &params.backbone;
    let h1 = elu(affine(&xt.view(), c1));
    let h2 = elu(affine(&h1.view(), c2));
    let h3 = elu(affine(&h2.view(), c3));
    let (g, h3_arg) = max_pool(&h3);

    // The global half of the segmentation layer is shared by every point.
    let w_local = params.seg.w.slice(s![..LOCAL_FEATURES, ..]);
    let w_global = params.seg.w.slice(s![LOCAL_FEATURES.., ..]);
    let shared = g.dot(&w_global) + &params.seg.b;
    let mut s_pre = h2.dot(&w_local);
    s_pre += &shared;
    let s = elu(s_pre);
    let logits = affine(&s.view(), &params.head);

    Activations {
        x,
        t1,
        t2,
        t2_arg,
        tg,
        t3,
        a,
        xt,
        h1,
        h2,
        h3,
        h3_arg,
        g,
        s,
        logits,
    }
}

/// Backpropagates gradients with respect to the logits and the input transform.
pub(crate) fn backward<T: Real>(
    params: &ModelParams<T>,
    act: &Activations<T>,
    d_logits: &Array2<T>,
    d_transform: &Array2<T>,
) -> ModelParams<T> {
    let mut grad = ModelParams::zeros(params.num_classes());
    grad.rng_seed = params.rng_seed;

    // head
    grad.head.w = act.s.t().dot(d_logits);
    grad.head.b = d_logits.sum_axis(Axis(0));
    let mut ds = d_logits.dot(&params.head.w.t());
    elu_back(&mut ds, &act.s);

    // segmentation layer, split into per-point and shared halves
    let w_local = params.seg.w.slice(s![..LOCAL_FEATURES, ..]);
    let w_global = params.seg.w.slice(s![LOCAL_FEATURES.., ..]);
    let ds_sum = ds.sum_axis(Axis(0));
    grad.seg.w.slice_mut(s![..LOCAL_FEATURES, ..]).assign(&act.h2.t().dot(&ds));
    grad.seg.w.slice_mut(s![LOCAL_FEATURES.., ..]).assign(&outer(&act.g, &ds_sum));
    grad.seg.b = ds_sum.clone();
    let mut dh2 = ds.dot(&w_local.t());
    let dg = w_global.dot(&ds_sum);

    // global feature max-pool
    let mut dh3 = Array2::zeros(act.h3.raw_dim());
    for (c, &i) in act.h3_arg.iter().enumerate() {
        dh3[[i, c]] = dg[c];
    }
    elu_back(&mut dh3, &act.h3);
    let [c1, c2, c3] = &params.backbone;
    grad.backbone[2].w = act.h2.t().dot(&dh3);
    grad.backbone[2].b = dh3.sum_axis(Axis(0));
    dh2 += &dh3.dot(&c3.w.t());

    elu_back(&mut dh2, &act.h2);
    grad.backbone[1].w = act.h1.t().dot(&dh2);
    grad.backbone[1].b = dh2.sum_axis(Axis(0));
    let mut dh1 = dh2.dot(&c2.w.t());

    elu_back(&mut dh1, &act.h1);
    grad.backbone[0].w = act.xt.t().dot(&dh1);
    grad.backbone[0].b = dh1.sum_axis(Axis(0));
    let dxt = dh1.dot(&c1.w.t());

    // input transform
    let da = act.x.t().dot(&dxt) + d_transform;
    let da_flat = Array1::from_iter(da.iter().copied());
    let [_, tc2, tf1, tf2] = &params.tnet;
    grad.tnet[3].w = outer(&act.t3, &da_flat);
    grad.tnet[3].b = da_flat.clone();
    let mut dt3 = tf2.w.dot(&da_flat);
    elu_back_vec(&mut dt3, &act.t3);
    grad.tnet[2].w = outer(&act.tg, &dt3);
    grad.tnet[2].b = dt3.clone();
    let dtg = tf1.w.dot(&dt3);

    let mut dt2 = Array2::zeros(act.t2.raw_dim());
    for (c, &i) in act.t2_arg.iter().enumerate() {
        dt2[[i, c]] = dtg[c];
    }
    elu_back(&mut dt2, &act.t2);
    grad.tnet[1].w = act.t1.t().dot(&dt2);
    grad.tnet[1].b = dt2.sum_axis(Axis(0));
    let mut dt1 = dt2.dot(&tc2.w.t());
    elu_back(&mut dt1, &act.t1);
    grad.tnet[0].w = act.x.t().dot(&dt1);
    grad.tnet[0].b = dt1.sum_axis(Axis(0));

    for layer in grad.layers_mut() {
        if !layer.w.is_standard_layout() {
            layer.w = layer.w.as_standard_layout().into_owned();
        }
    }
    grad
}

/// Runs the network on a cloud, returning per-point logits and the predicted 3x3 input transform.
pub fn forward<T: Real>(params: &ModelParams<T>, cloud: &PointCloud) -> Result<(Logits<T>, Array2<T>)> {
    if !params.is_finite() {
        return Err(Error::invalid("model parameters are not finite"));
    }
    let act = forward_cached(params, positions_matrix(cloud));
    if act.logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("forward pass produced non-finite logits"));
    }
    Ok((Logits::new(act.logits), act.a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::init_or_resize_head;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        PointCloud::new("r", pts).unwrap()
    }

    #[test]
    fn single_point_shape() {
        let p = init_or_resize_head(None, 4, 0).unwrap();
        let cloud = PointCloud::new("one", vec![[0.1, 0.2, 0.3]]).unwrap();
        let (logits, a) = forward(&p, &cloud).unwrap();
        assert_eq!(logits.values.dim(), (1, 4));
        assert_eq!(a.dim(), (3, 3));
        assert!(logits.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = init_or_resize_head(None, 3, 1).unwrap();
        let (logits, _) = forward(&p, &random_cloud(50, 2)).unwrap();
        for row in logits.softmax().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn duplicated_points_get_identical_rows() {
        let p = init_or_resize_head(None, 3, 2).unwrap();
        let base = random_cloud(20, 3);
        let mut pts = base.positions().to_vec();
        pts.extend_from_slice(base.positions());
        let doubled = PointCloud::new("d", pts).unwrap();
        let (single, _) = forward(&p, &base).unwrap();
        let (double, _) = forward(&p, &doubled).unwrap();
        for i in 0..20 {
            assert_eq!(double.values.row(i), double.values.row(i + 20));
            for c in 0..3 {
                assert!((double.values[[i, c]] - single.values[[i, c]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let p = init_or_resize_head(None, 3, 4).unwrap();
        let base = random_cloud(40, 5);
        let mut perm: Vec<usize> = (0..40).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(6));
        let shuffled = base.select(&perm).unwrap();
        let (a, ta) = forward(&p, &base).unwrap();
        let (b, tb) = forward(&p, &shuffled).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((b.values[[k, c]] - a.values[[i, c]]).abs() < 1e-5);
            }
        }
        assert_eq!(ta, tb);
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        let l = Logits::new(ndarray::arr2(&[[1.0f32, 1.0, 0.0], [0.0, 2.0, 3.0]]));
        assert_eq!(l.argmax(), vec![0, 2]);
    }
}
