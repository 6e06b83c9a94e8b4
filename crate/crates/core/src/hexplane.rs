//! HexPlane dynamic radiance field: three spatial and three spatiotemporal
//! feature planes, fused by element-wise products, followed by a density head,
//! an appearance head and a small view-dependent colour network.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aabb::{Aabb, InvalidAabb};
use crate::ad::{
    Activation, AdError, Linear, Mlp, ParamGroup, ParamId, ParamStore, Tape, Tensor, UnaryOp, Var,
};
use crate::liegroup::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("point cannot be normalised into the scene box: {0}")]
    PointOutsideAabb(#[from] InvalidAabb),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// How the three plane-pair products are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Concat,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HexPlaneConfig {
    pub resolution: usize,
    pub features: usize,
    pub embedding: usize,
    pub view_frequencies: usize,
    pub rgb_hidden: usize,
    pub init_range: f64,
    pub fusion: Fusion,
}

impl Default for HexPlaneConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            features: 16,
            embedding: 15,
            view_frequencies: 4,
            rgb_hidden: 64,
            init_range: 0.1,
            fusion: Fusion::Concat,
        }
    }
}

impl HexPlaneConfig {
    pub fn fused_width(&self) -> usize {
        match self.fusion {
            Fusion::Concat => 3 * self.features,
            Fusion::Sum => self.features,
        }
    }

    pub fn view_encoding_width(&self) -> usize {
        3 + 6 * self.view_frequencies
    }
}

/// Plane names with the coordinate pair each one spans (3 = time).
pub const PLANES: [(&str, usize, usize); 6] = [
    ("xy", 0, 1),
    ("xz", 0, 2),
    ("yz", 1, 2),
    ("zt", 2, 3),
    ("yt", 1, 3),
    ("xt", 0, 3),
];

/// Spatial plane index paired with the spatiotemporal plane covering the
/// complementary axes.
pub const PAIRS: [(usize, usize); 3] = [(0, 3), (1, 4), (2, 5)];

/// Density and colour at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub sigma: f64,
    pub rgb: [f64; 3],
}

impl FieldSample {
    pub const EMPTY: FieldSample = FieldSample {
        sigma: 0.0,
        rgb: [0.0; 3],
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct HexPlane {
    pub config: HexPlaneConfig,
    pub aabb: Aabb,
    pub planes: [ParamId; 6],
    pub density: Linear,
    pub appearance: Linear,
    pub rgb: Mlp,
}

/// `[d, sin(2ᵏπd), cos(2ᵏπd)]` for `k < frequencies`, sin terms before cos
/// terms within each frequency.
pub fn encode_direction(d: &Vec3, frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * frequencies);
    out.extend_from_slice(&[d.x, d.y, d.z]);
    for k in 0..frequencies {
        let w = (1u64 << k) as f64 * std::f64::consts::PI;
        for c in 0..3 {
            out.push((w * d[c]).sin());
        }
        for c in 0..3 {
            out.push((w * d[c]).cos());
        }
    }
    out
}

fn linear<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Linear, AdError> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = Tensor::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    );
    let b = Tensor::from_vec(
        1,
        fan_out,
        (0..fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    );
    Ok(Linear {
        weight: store.add(format!("{name}.weight"), ParamGroup::Radiance, w)?,
        bias: store.add(format!("{name}.bias"), ParamGroup::Radiance, b)?,
    })
}

impl HexPlane {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: HexPlaneConfig,
        aabb: Aabb,
        rng: &mut R,
    ) -> Result<Self, FieldError> {
        aabb.validate()?;
        let res = config.resolution;
        let f = config.features;
        let r = config.init_range;
        let mut planes = [ParamId(0); 6];
        for (slot, (name, _, _)) in planes.iter_mut().zip(PLANES) {
            let data = (0..res * res * f)
                .map(|_| rng.random_range(-r..r))
                .collect();
            *slot = store.add(
                format!("hexplane.plane_{name}"),
                ParamGroup::Radiance,
                Tensor::from_vec(res * res, f, data),
            )?;
        }
        let fused = config.fused_width();
        let density = linear(store, "hexplane.density", fused, 1, rng)?;
        let appearance = linear(store, "hexplane.appearance", fused, config.embedding, rng)?;
        let rgb = Mlp::build(
            store,
            "hexplane.rgb",
            ParamGroup::Radiance,
            &[
                config.embedding + config.view_encoding_width(),
                config.rgb_hidden,
                3,
            ],
            Activation::Relu,
            Activation::Sigmoid,
            false,
            rng,
        )?;
        Ok(Self {
            config,
            aabb,
            planes,
            density,
            appearance,
            rgb,
        })
    }

    /// Rebinds the field to parameters already present in `store` (for
    /// example after loading a checkpoint).
    pub fn bind(
        store: &ParamStore,
        config: HexPlaneConfig,
        aabb: Aabb,
    ) -> Result<Self, FieldError> {
        aabb.validate()?;
        let id = |name: String| store.id(&name).ok_or(AdError::UnknownParam(name));
        let mut planes = [ParamId(0); 6];
        for (slot, (name, _, _)) in planes.iter_mut().zip(PLANES) {
            *slot = id(format!("hexplane.plane_{name}"))?;
        }
        let lin = |name: &str| -> Result<Linear, AdError> {
            Ok(Linear {
                weight: id(format!("{name}.weight"))?,
                bias: id(format!("{name}.bias"))?,
            })
        };
        let rgb = Mlp {
            layers: vec![lin("hexplane.rgb.0")?, lin("hexplane.rgb.1")?],
            activations: vec![Activation::Relu, Activation::Sigmoid],
        };
        Ok(Self {
            density: lin("hexplane.density")?,
            appearance: lin("hexplane.appearance")?,
            config,
            aabb,
            planes,
            rgb,
        })
    }

    /// Fused plane features for world-space `points` (N×3) at `times` (N×1).
    pub fn encode(&self, tape: &mut Tape<'_>, points: Var, times: Var) -> Result<Var, FieldError> {
        self.aabb.validate()?;
        let e = self.aabb.extent();
        let shift = tape.constant(Tensor::from_rows(&[self.aabb.min]));
        let inv = tape.constant(Tensor::from_rows(&[[1.0 / e[0], 1.0 / e[1], 1.0 / e[2]]]));
        let local = tape.sub(points, shift);
        let unit = tape.mul(local, inv);
        let coords = [
            tape.slice_cols(unit, 0, 1),
            tape.slice_cols(unit, 1, 1),
            tape.slice_cols(unit, 2, 1),
            times,
        ];
        let res = self.config.resolution;
        let mut feats = Vec::with_capacity(6);
        for (k, (_, a, b)) in PLANES.iter().enumerate() {
            let uv = tape.concat_cols(&[coords[*a], coords[*b]]);
            let plane = tape.param(self.planes[k]);
            feats.push(tape.bilerp(plane, uv, res));
        }
        let products: Vec<Var> = PAIRS
            .iter()
            .map(|&(s, st)| tape.mul(feats[s], feats[st]))
            .collect();
        Ok(match self.config.fusion {
            Fusion::Concat => tape.concat_cols(&products),
            Fusion::Sum => {
                let ab = tape.add(products[0], products[1]);
                tape.add(ab, products[2])
            }
        })
    }

    /// Density (N×1, softplus) and appearance embedding (N×E).
    pub fn density_and_embedding(
        &self,
        tape: &mut Tape<'_>,
        points: Var,
        times: Var,
    ) -> Result<(Var, Var), FieldError> {
        let fused = self.encode(tape, points, times)?;
        let wd = tape.param(self.density.weight);
        let bd = tape.param(self.density.bias);
        let zd = tape.matmul(fused, wd);
        let zd = tape.add(zd, bd);
        let sigma = tape.unary(zd, UnaryOp::Softplus);
        let wa = tape.param(self.appearance.weight);
        let ba = tape.param(self.appearance.bias);
        let emb = tape.matmul(fused, wa);
        let emb = tape.add(emb, ba);
        Ok((sigma, emb))
    }

    /// Colour from an embedding and pre-encoded view directions (N×(3+6L)).
    pub fn color(
        &self,
        tape: &mut Tape<'_>,
        embedding: Var,
        view_encoding: Var,
    ) -> Result<Var, FieldError> {
        let input = tape.concat_cols(&[embedding, view_encoding]);
        Ok(self.rgb.forward(tape, input)?)
    }

    /// `(sigma, rgb)` on the tape for a batch of points.
    pub fn query(
        &self,
        tape: &mut Tape<'_>,
        points: Var,
        times: Var,
        view_encoding: Var,
    ) -> Result<(Var, Var), FieldError> {
        let (sigma, emb) = self.density_and_embedding(tape, points, times)?;
        let rgb = self.color(tape, emb, view_encoding)?;
        Ok((sigma, rgb))
    }

    /// Encodes unit view directions into a constant tensor.
    pub fn view_encoding(&self, dirs: &[Vec3]) -> Tensor {
        let w = self.config.view_encoding_width();
        let data = dirs
            .iter()
            .flat_map(|d| encode_direction(d, self.config.view_frequencies))
            .collect();
        Tensor::from_vec(dirs.len(), w, data)
    }

    /// Single-point evaluation without gradients.
    pub fn query_point(
        &self,
        store: &ParamStore,
        p: &Vec3,
        t: f64,
        view_dir: &Vec3,
    ) -> Result<FieldSample, FieldError> {
        let mut tape = Tape::new(store);
        let pv = tape.constant(Tensor::from_rows(&[[p.x, p.y, p.z]]));
        let tv = tape.constant(Tensor::scalar(t));
        let ve = tape.constant(self.view_encoding(&[*view_dir]));
        let (sigma, rgb) = self.query(&mut tape, pv, tv, ve)?;
        let c = tape.value(rgb);
        Ok(FieldSample {
            sigma: tape.value(sigma).item(),
            rgb: [c.get(0, 0), c.get(0, 1), c.get(0, 2)],
        })
    }
}

/// Bilinear lookup of one `(u, v)` location in a `res × res × F` plane.
pub fn bilerp(plane: &Tensor, res: usize, u: f64, v: f64) -> Vec<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let p = tape.constant(plane.clone());
    let c = tape.constant(Tensor::from_rows(&[[u, v]]));
    let out = tape.bilerp(p, c, res);
    tape.value(out).data().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, res: usize, f: usize) -> Tensor {
        Tensor::from_vec(
            res * res,
            f,
            (0..res * res * f)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    // Direct four-term weighted sum.
    fn bilerp_oracle(plane: &Tensor, res: usize, u: f64, v: f64) -> Vec<f64> {
        let x = u * (res - 1) as f64;
        let y = v * (res - 1) as f64;
        let i = (x.floor() as usize).min(res - 2);
        let j = (y.floor() as usize).min(res - 2);
        let (a, b) = (x - i as f64, y - j as f64);
        (0..plane.cols())
            .map(|c| {
                (1.0 - a) * (1.0 - b) * plane.get(j * res + i, c)
                    + a * (1.0 - b) * plane.get(j * res + i + 1, c)
                    + (1.0 - a) * b * plane.get((j + 1) * res + i, c)
                    + a * b * plane.get((j + 1) * res + i + 1, c)
            })
            .collect()
    }

    #[test]
    fn bilerp_hits_texels_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let res = 5;
        let plane = random_plane(&mut rng, res, 3);
        for j in 0..res {
            for i in 0..res {
                let u = i as f64 / (res - 1) as f64;
                let v = j as f64 / (res - 1) as f64;
                assert_eq!(bilerp(&plane, res, u, v), plane.row(j * res + i).to_vec());
            }
        }
    }

    #[test]
    fn bilerp_midpoint_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let res = 4;
        let plane = random_plane(&mut rng, res, 2);
        let out = bilerp(&plane, res, 1.5 / 3.0, 0.5 / 3.0);
        for c in 0..2 {
            let mean =
                (plane.get(1, c) + plane.get(2, c) + plane.get(5, c) + plane.get(6, c)) / 4.0;
            assert!((out[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn bilerp_matches_weighted_sum_and_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let res = 7;
        let plane = random_plane(&mut rng, res, 4);
        for _ in 0..200 {
            let (u, v) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let a = bilerp(&plane, res, u, v);
            let b = bilerp_oracle(&plane, res, u, v);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert_eq!(
            bilerp(&plane, res, -0.5, 2.0),
            bilerp(&plane, res, 0.0, 1.0)
        );
    }

    fn small_field(seed: u64, fusion: Fusion) -> (ParamStore, HexPlane) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = HexPlaneConfig {
            resolution: 6,
            features: 4,
            embedding: 5,
            view_frequencies: 2,
            rgb_hidden: 8,
            init_range: 0.5,
            fusion,
        };
        let field = HexPlane::new(&mut store, cfg, Aabb::cube(1.0), &mut rng).unwrap();
        (store, field)
    }

    fn encode_one(store: &ParamStore, field: &HexPlane, p: [f64; 3], t: f64) -> Vec<f64> {
        let mut tape = Tape::new(store);
        let pv = tape.constant(Tensor::from_rows(&[p]));
        let tv = tape.constant(Tensor::scalar(t));
        let e = field.encode(&mut tape, pv, tv).unwrap();
        tape.value(e).data().to_vec()
    }

    #[test]
    fn ones_planes_encode_to_ones() {
        let (mut store, field) = small_field(3, Fusion::Concat);
        for id in field.planes {
            store.value_mut(id).fill(1.0);
        }
        let e = encode_one(&store, &field, [0.3, -0.2, 0.9], 0.4);
        assert_eq!(e, vec![1.0; 12]);
    }

    #[test]
    fn zeroed_xy_plane_gates_first_block() {
        let (mut store, field) = small_field(4, Fusion::Concat);
        store.value_mut(field.planes[0]).fill(0.0);
        let e = encode_one(&store, &field, [0.1, 0.5, -0.7], 0.8);
        assert!(e[..4].iter().all(|&x| x == 0.0));
        assert!(e[4..].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn encode_matches_straight_line_oracle() {
        let (store, field) = small_field(5, Fusion::Concat);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..50 {
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let t = rng.random_range(0.0..1.0);
            let unit = [
                (p[0] + 1.0) / 2.0,
                (p[1] + 1.0) / 2.0,
                (p[2] + 1.0) / 2.0,
                t,
            ];
            let look = |k: usize| {
                let (_, a, b) = PLANES[k];
                bilerp_oracle(store.value(field.planes[k]), 6, unit[a], unit[b])
            };
            let mut expected = Vec::new();
            for (s, st) in PAIRS {
                let (fa, fb) = (look(s), look(st));
                expected.extend(fa.iter().zip(&fb).map(|(x, y)| x * y));
            }
            let got = encode_one(&store, &field, p, t);
            for (x, y) in got.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sum_fusion_has_feature_width() {
        let (store, field) = small_field(6, Fusion::Sum);
        assert_eq!(encode_one(&store, &field, [0.0; 3], 0.5).len(), 4);
    }

    #[test]
    fn query_closed_forms() {
        let (mut store, field) = small_field(7, Fusion::Concat);
        store.value_mut(field.density.weight).fill(0.0);
        store.value_mut(field.density.bias).fill(0.0);
        let last = *field.rgb.layers.last().unwrap();
        store.value_mut(last.weight).fill(0.0);
        store.value_mut(last.bias).fill(0.0);
        let s = field
            .query_point(
                &store,
                &Vec3::new(0.2, 0.3, -0.4),
                0.5,
                &Vec3::new(0.0, 0.0, -1.0),
            )
            .unwrap();
        assert!((s.sigma - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(s.rgb, [0.5; 3]);
    }

    #[test]
    fn sigma_and_rgb_stay_in_range() {
        let (store, field) = small_field(8, Fusion::Concat);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for _ in 0..200 {
            let p = Vec3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let d = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                0.5,
            )
            .normalize();
            let s = field
                .query_point(&store, &p, rng.random_range(0.0..1.0), &d)
                .unwrap();
            assert!(s.sigma >= 0.0);
            assert!(s.rgb.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn nan_bounds_are_rejected() {
        let (store, mut field) = small_field(9, Fusion::Concat);
        field.aabb.min[0] = f64::NAN;
        let r = field.query_point(&store, &Vec3::zeros(), 0.0, &Vec3::z());
        assert!(matches!(r, Err(FieldError::PointOutsideAabb(_))));
    }

    #[test]
    fn texel_perturbation_is_local() {
        let (mut store, field) = small_field(10, Fusion::Concat);
        let d = Vec3::new(0.0, 0.0, -1.0);
        // Texel (0, 0) of the xy plane covers u, v < 1/5 only.
        let near = Vec3::new(-0.9, -0.9, 0.2);
        let far = Vec3::new(0.5, 0.5, 0.2);
        let before = (
            field.query_point(&store, &near, 0.3, &d).unwrap(),
            field.query_point(&store, &far, 0.3, &d).unwrap(),
        );
        store.value_mut(field.planes[0]).row_mut(0)[0] += 1.0;
        let after = (
            field.query_point(&store, &near, 0.3, &d).unwrap(),
            field.query_point(&store, &far, 0.3, &d).unwrap(),
        );
        assert_ne!(before.0, after.0);
        assert_eq!(before.1, after.1);
    }

    #[test]
    fn encode_is_continuous() {
        let (store, field) = small_field(11, Fusion::Concat);
        let a = encode_one(&store, &field, [0.13, -0.42, 0.77], 0.31);
        let b = encode_one(
            &store,
            &field,
            [0.13 + 1e-6, -0.42 - 1e-6, 0.77 + 1e-6],
            0.31 + 1e-6,
        );
        let diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-4);
    }

    #[test]
    fn sigma_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (store, field) = small_field(20 + seed, Fusion::Concat);
            let pts =
                Tensor::from_rows(&[[0.11, -0.32, 0.45], [-0.6, 0.25, 0.05], [0.7, 0.7, -0.2]]);
            let dirs = field.view_encoding(&[Vec3::z(), Vec3::x(), Vec3::new(0.6, 0.0, 0.8)]);
            let opts = GradCheckOptions {
                max_per_tensor: Some(24),
                ..Default::default()
            };
            let report = check_gradients(&store, &opts, |tape| {
                let p = tape.constant(pts.clone());
                let t = tape.constant(Tensor::column(&[0.2, 0.5, 0.9]));
                let v = tape.constant(dirs.clone());
                let (sigma, rgb) = field.query(tape, p, t, v).unwrap();
                let a = tape.sum(sigma);
                let b = tape.mean(rgb);
                tape.add(a, b)
            });
            assert!(report.max_rel_err < 1e-4, "{report:?}");
        }
    }
}
