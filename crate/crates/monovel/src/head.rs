//! Prediction head and output decoding.
//!
//! A two-layer fully connected head maps the fused feature to three raw
//! outputs: planar velocity `(v_x, v_z)` in meters per second and a depth
//! residual in meters. The residual is added to a geometric reference depth
//! obtained by backprojecting the box's bottom-center through the flat-road
//! assumption, so the network only has to learn the correction (vehicle
//! bodies sit above the road, which biases the geometric depth); the lateral
//! position then follows from the pinhole relation at the corrected depth.

use thiserror::Error;

use crate::geometry::{
    backproject_bottom_center, BoundingBox2D, CameraIntrinsics, GeometryError, Planar,
    VehicleState,
};
use crate::params::{Binder, Init, ParamStore};
use crate::tape::{NodeId, Tape};
use rand_chacha::ChaCha8Rng;

/// Width of the hidden layer.
pub const HEAD_HIDDEN: usize = 128;
/// Raw outputs: v_x, v_z, depth residual.
pub const HEAD_OUTPUTS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("decoded depth {z:.3} m is not positive (reference {reference:.3} m, residual {residual:.3} m)")]
    NonPositiveDepth { z: f64, reference: f64, residual: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Differentiable decode products.
#[derive(Debug, Clone, Copy)]
pub struct DecodedNodes {
    /// Planar velocity `(v_x, v_z)`, length 2.
    pub velocity: NodeId,
    /// Planar position `(p_x, p_z)`, length 2.
    pub position: NodeId,
}

pub struct PredictionHead;

impl PredictionHead {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, in_dim: usize) {
        store
            .init("head.fc1.w", &[HEAD_HIDDEN, in_dim], Init::FanIn { fan_in: in_dim, gain: 1.0 }, rng)
            .expect("head weight registration");
        store.init("head.fc1.b", &[HEAD_HIDDEN], Init::Zeros, rng).expect("head bias");
        store
            .init(
                "head.fc2.w",
                &[HEAD_OUTPUTS, HEAD_HIDDEN],
                Init::FanIn { fan_in: HEAD_HIDDEN, gain: 1.0 },
                rng,
            )
            .expect("head weight registration");
        store.init("head.fc2.b", &[HEAD_OUTPUTS], Init::Zeros, rng).expect("head bias");
    }

    /// Map the fused feature to the three raw outputs.
    pub fn predict(
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        fused: NodeId,
    ) -> NodeId {
        let w1 = binder.bind(tape, store, "head.fc1.w");
        let b1 = binder.bind(tape, store, "head.fc1.b");
        let w2 = binder.bind(tape, store, "head.fc2.w");
        let b2 = binder.bind(tape, store, "head.fc2.b");
        let h = tape.linear(fused, w1, Some(b1));
        let h = tape.tanh(h);
        tape.linear(h, w2, Some(b2))
    }

    /// The geometric reference depth the residual output is measured from.
    pub fn reference_depth(
        bbox: &BoundingBox2D,
        cam: &CameraIntrinsics,
    ) -> Result<f64, GeometryError> {
        backproject_bottom_center(bbox, cam).map(|(_, z)| z)
    }

    /// Differentiable decode: velocity passes through, depth adds the
    /// geometric reference, lateral position follows the pinhole ray of the
    /// box center at the corrected depth.
    pub fn decode(
        tape: &mut Tape,
        raw: NodeId,
        bbox: &BoundingBox2D,
        cam: &CameraIntrinsics,
    ) -> Result<DecodedNodes, HeadError> {
        assert_eq!(tape.shape(raw), &[HEAD_OUTPUTS], "raw head output must have length 3");
        let z_ref = Self::reference_depth(bbox, cam)?;
        let k = (bbox.b_x - cam.c_x) / cam.f_x;
        let velocity = tape.slice_axis(raw, 0, 0, 2);
        let dz = tape.slice_axis(raw, 0, 2, 3);
        let p_z = tape.add_scalar(dz, z_ref);
        let p_x = tape.scale(p_z, k);
        let position = tape.concat(&[p_x, p_z], 0);
        Ok(DecodedNodes { velocity, position })
    }

    /// Plain decode of raw outputs into a full vehicle state.
    pub fn decode_state(
        raw: &[f64; 3],
        bbox: &BoundingBox2D,
        cam: &CameraIntrinsics,
    ) -> Result<VehicleState, HeadError> {
        let z_ref = Self::reference_depth(bbox, cam)?;
        let z = z_ref + raw[2];
        if z <= 0.0 {
            return Err(HeadError::NonPositiveDepth { z, reference: z_ref, residual: raw[2] });
        }
        let x = (bbox.b_x - cam.c_x) / cam.f_x * z;
        Ok(VehicleState::new(Planar::new(x, z), Planar::new(raw[0], raw[1])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{fd_rel_error, FD_STEP, FD_TOL};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(96.0, 96.0, 96.0, 32.0, 1.5).unwrap()
    }

    /// Box whose bottom-center backprojects to exactly 20 m and whose
    /// center ray has slope (b_x - c_x) / f_x = 1/10.
    fn reference_box(cam: &CameraIntrinsics) -> BoundingBox2D {
        let v_bottom = cam.c_y + cam.f_y * cam.height_above_ground / 20.0;
        let b_x = cam.c_x + cam.f_x / 10.0;
        let b_h = 4.0;
        BoundingBox2D::new(b_x, v_bottom - b_h / 2.0, 6.0, b_h).unwrap()
    }

    #[test]
    fn decode_hand_case_matches() {
        let cam = cam();
        let bbox = reference_box(&cam);
        assert!((PredictionHead::reference_depth(&bbox, &cam).unwrap() - 20.0).abs() < 1e-12);
        let state = PredictionHead::decode_state(&[0.3, -4.0, 1.5], &bbox, &cam).unwrap();
        assert!((state.position.x - 2.15).abs() < 1e-12);
        assert!((state.position.z - 21.5).abs() < 1e-12);
        assert!((state.velocity.x - 0.3).abs() < 1e-12);
        assert!((state.velocity.z + 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_predict_the_geometric_reference() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        PredictionHead::register(&mut store, &mut rng, 64);
        for name in ["head.fc1.w", "head.fc1.b", "head.fc2.w", "head.fc2.b"] {
            let idx = store.index_of(name).unwrap();
            store.value_mut(idx).fill(0.0);
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, false);
        let fused = tape.constant(ArrayD::from_shape_vec(IxDyn(&[64]), vec![0.7; 64]).unwrap());
        let raw = PredictionHead::predict(&mut tape, &mut binder, &store, fused);
        let raw_vals = tape.value(raw).clone();
        assert!(raw_vals.iter().all(|v| *v == 0.0));
        let cam = cam();
        let bbox = reference_box(&cam);
        let arr: [f64; 3] = [raw_vals[IxDyn(&[0])], raw_vals[IxDyn(&[1])], raw_vals[IxDyn(&[2])]];
        let state = PredictionHead::decode_state(&arr, &bbox, &cam).unwrap();
        assert_eq!(state.velocity.x, 0.0);
        assert_eq!(state.velocity.z, 0.0);
        assert!((state.position.z - 20.0).abs() < 1e-12);
        assert!((state.position.x - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tape_decode_matches_plain_decode() {
        let cam = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let b_x = rng.gen_range(40.0..150.0);
            let v_bottom = cam.c_y + rng.gen_range(2.0..28.0);
            let b_h = rng.gen_range(4.0..12.0);
            let bbox =
                BoundingBox2D::new(b_x, v_bottom - b_h / 2.0, rng.gen_range(4.0..20.0), b_h)
                    .unwrap();
            let raw = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-2.0..2.0)];
            let mut tape = Tape::new();
            let raw_node =
                tape.constant(ArrayD::from_shape_vec(IxDyn(&[3]), raw.to_vec()).unwrap());
            let nodes = PredictionHead::decode(&mut tape, raw_node, &bbox, &cam).unwrap();
            let state = PredictionHead::decode_state(&raw, &bbox, &cam).unwrap();
            let v = tape.value(nodes.velocity);
            let p = tape.value(nodes.position);
            assert!((v[IxDyn(&[0])] - state.velocity.x).abs() < 1e-12);
            assert!((v[IxDyn(&[1])] - state.velocity.z).abs() < 1e-12);
            assert!((p[IxDyn(&[0])] - state.position.x).abs() < 1e-12);
            assert!((p[IxDyn(&[1])] - state.position.z).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_rejects_non_positive_depth() {
        let cam = cam();
        let bbox = reference_box(&cam);
        let err = PredictionHead::decode_state(&[0.0, 0.0, -25.0], &bbox, &cam).unwrap_err();
        assert!(matches!(err, HeadError::NonPositiveDepth { .. }));
    }

    #[test]
    fn head_passes_gradient_check() {
        let in_dim = 16;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        PredictionHead::register(&mut store, &mut rng, in_dim);
        let cam = cam();
        let bbox = reference_box(&cam);
        let feat: Vec<f64> = (0..in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x0 = store.flat();
        let mut run = |xs: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            store.set_flat(xs).unwrap();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&store, true);
            let fused =
                tape.constant(ArrayD::from_shape_vec(IxDyn(&[in_dim]), feat.clone()).unwrap());
            let raw = PredictionHead::predict(&mut tape, &mut binder, &store, fused);
            let nodes = PredictionHead::decode(&mut tape, raw, &bbox, &cam).unwrap();
            let both = tape.concat(&[nodes.velocity, nodes.position], 0);
            let mut rr = ChaCha8Rng::seed_from_u64(4);
            let r: Vec<f64> = (0..4).map(|_| rr.gen_range(-1.0..1.0)).collect();
            let rc = tape.constant(ArrayD::from_shape_vec(IxDyn(&[4]), r).unwrap());
            let prod = tape.mul(both, rc);
            let loss = tape.sum(prod);
            if !want_grad {
                return (tape.scalar(loss), Vec::new());
            }
            let grads = tape.backward(loss);
            let mut analytic = Vec::new();
            for g in binder.collect_grads(&grads) {
                analytic.extend(g.expect("unreached head weight").iter());
            }
            (tape.scalar(loss), analytic)
        };
        let (_, analytic) = run(&x0, true);
        let err = fd_rel_error(|xs| run(xs, false).0, &x0, &analytic, FD_STEP);
        assert!(err < FD_TOL, "head gradient mismatch: rel err {err:.3e}");
    }
}
