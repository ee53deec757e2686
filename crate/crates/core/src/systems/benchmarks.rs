use serde::{Deserialize, Serialize};

use super::{BoxSet, DynamicalSystem};
use crate::linalg::{Matrix, Vector};

/// Parameters of the 3-state benchmark with parametric and input-matrix
/// mismatch between the nominal and the true plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeDParams {
    pub theta: [f64; 3],
    pub delta_theta: [f64; 3],
    /// Row-major 3×2 input matrix of the true plant.
    pub true_actuation: [[f64; 2]; 3],
}

impl Default for ThreeDParams {
    fn default() -> Self {
        Self {
            theta: [0.4, 0.2, 0.1],
            delta_theta: [0.0, 0.02, -0.01],
            true_actuation: [[0.0, 0.0], [0.5, 0.0], [1.0, 0.5]],
        }
    }
}

pub const THREE_D_ACTUATION: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]];

fn rows_to_matrix(rows: &[[f64; 2]; 3]) -> Matrix {
    Matrix::from_row_slice(
        3,
        2,
        &[
            rows[0][0], rows[0][1], rows[1][0], rows[1][1], rows[2][0], rows[2][1],
        ],
    )
}

impl ThreeDParams {
    /// No perturbation and identical input matrices.
    pub fn unperturbed(theta: [f64; 3]) -> Self {
        Self {
            theta,
            delta_theta: [0.0; 3],
            true_actuation: THREE_D_ACTUATION,
        }
    }

    pub fn perturbed_theta(&self) -> [f64; 3] {
        [
            self.theta[0] + self.delta_theta[0],
            self.theta[1] + self.delta_theta[1],
            self.theta[2] + self.delta_theta[2],
        ]
    }

    fn phi(theta: &[f64; 3], x: &Vector) -> Vector {
        let sq = theta[2] * x[0] * x[0];
        Vector::from_vec(vec![theta[1] * x[2] + sq, theta[1] * x[1] + sq])
    }

    fn open_drift(theta1: f64, x: &Vector) -> Vector {
        Vector::from_vec(vec![x[2] - theta1 * x[0], x[0] * x[0] - x[1], x[1].tanh()])
    }

    /// Nominal right-hand side `f(x) + B(u − φ(x))`.
    pub fn nominal_rhs(&self, x: &Vector, u: &Vector) -> Vector {
        Self::open_drift(self.theta[0], x)
            + rows_to_matrix(&THREE_D_ACTUATION) * (u - Self::phi(&self.theta, x))
    }

    /// True right-hand side with perturbed parameters and input matrix.
    pub fn true_rhs(&self, x: &Vector, u: &Vector) -> Vector {
        let th = self.perturbed_theta();
        Self::open_drift(th[0], x) + rows_to_matrix(&self.true_actuation) * (u - Self::phi(&th, x))
    }

    /// The true plant written directly, with no additive uncertainty.
    pub fn true_direct_system(&self) -> DynamicalSystem {
        let th = self.perturbed_theta();
        let b = rows_to_matrix(&self.true_actuation);
        let b_drift = b.clone();
        DynamicalSystem::new(
            "threeD-true-direct",
            3,
            2,
            move |x| Self::open_drift(th[0], x) - &b_drift * Self::phi(&th, x),
            move |_| b.clone(),
        )
        .with_state_box(BoxSet::symmetric(&[15.0; 3]))
        .with_input_box(BoxSet::symmetric(&[1.5; 2]))
    }
}

/// The 3-state benchmark as a `(nominal, true)` pair. The true system is the
/// nominal one plus `ζ = f_true − f_nom`.
pub fn benchmark_3d(params: &ThreeDParams) -> (DynamicalSystem, DynamicalSystem) {
    let theta = params.theta;
    let b = rows_to_matrix(&THREE_D_ACTUATION);
    let b_drift = b.clone();
    let nominal = DynamicalSystem::new(
        "threeD",
        3,
        2,
        move |x| ThreeDParams::open_drift(theta[0], x) - &b_drift * ThreeDParams::phi(&theta, x),
        move |_| b.clone(),
    )
    .with_state_box(BoxSet::symmetric(&[15.0; 3]))
    .with_input_box(BoxSet::symmetric(&[1.5; 2]))
    .with_params(&[
        ("theta1", params.theta[0]),
        ("theta2", params.theta[1]),
        ("theta3", params.theta[2]),
        ("delta_theta1", params.delta_theta[0]),
        ("delta_theta2", params.delta_theta[1]),
        ("delta_theta3", params.delta_theta[2]),
    ]);
    let p = params.clone();
    let truth = nominal
        .clone()
        .with_uncertainty(move |x, u| p.true_rhs(x, u) - p.nominal_rhs(x, u));
    (nominal, truth)
}

/// Planar VTOL parameters (SI units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VtolParams {
    pub mass: f64,
    pub inertia: f64,
    pub gravity: f64,
    pub arm: f64,
    pub k_z: f64,
    pub k_phidot: f64,
}

impl Default for VtolParams {
    fn default() -> Self {
        Self {
            mass: 0.486,
            inertia: 0.00383,
            gravity: 9.81,
            arm: 0.25,
            k_z: 0.04,
            k_phidot: 0.05,
        }
    }
}

impl VtolParams {
    pub fn actuation(&self) -> Matrix {
        let mut b = Matrix::zeros(6, 2);
        b[(4, 0)] = 1.0 / self.mass;
        b[(4, 1)] = 1.0 / self.mass;
        b[(5, 0)] = self.arm / self.inertia;
        b[(5, 1)] = -self.arm / self.inertia;
        b
    }

    /// Input-channel disturbance `[−k_z‖v‖ + k_φ̇‖u‖, k_φ̇‖u‖]`.
    pub fn input_disturbance(&self, x: &Vector, u: &Vector) -> Vector {
        let speed = x[3].hypot(x[4]);
        let thrust = u.norm();
        Vector::from_vec(vec![
            -self.k_z * speed + self.k_phidot * thrust,
            self.k_phidot * thrust,
        ])
    }

    pub fn hover_thrust(&self) -> f64 {
        0.5 * self.mass * self.gravity
    }
}

/// Default VTOL operating box: positions in a 14 m square, `v ∈ [−2,2]×[−1,1]`,
/// `φ, φ̇ ∈ ±60°`.
pub fn vtol_state_box() -> BoxSet {
    let deg60 = 60f64.to_radians();
    BoxSet::new(
        vec![-2.0, -2.0, -deg60, -2.0, -1.0, -deg60],
        vec![12.0, 12.0, deg60, 2.0, 1.0, deg60],
    )
}

/// Planar VTOL with state `[p_x, p_z, φ, v_x, v_z, φ̇]` and rotor thrusts as inputs.
/// The uncertainty enters through the actuation channel.
pub fn benchmark_vtol(params: &VtolParams) -> DynamicalSystem {
    let g = params.gravity;
    let b = params.actuation();
    let b_zeta = b.clone();
    let p = params.clone();
    DynamicalSystem::new(
        "vtol",
        6,
        2,
        move |x| {
            let (phi, vx, vz, phidot) = (x[2], x[3], x[4], x[5]);
            let (s, c) = phi.sin_cos();
            Vector::from_vec(vec![
                vx * c - vz * s,
                vx * s + vz * c,
                phidot,
                vz * phidot - g * s,
                -vx * phidot - g * c,
                0.0,
            ])
        },
        move |_| b.clone(),
    )
    .with_state_box(vtol_state_box())
    .with_input_box(BoxSet::new(vec![0.0, 0.0], vec![4.0, 4.0]))
    .with_params(&[
        ("mass", params.mass),
        ("inertia", params.inertia),
        ("gravity", params.gravity),
        ("arm", params.arm),
        ("k_z", params.k_z),
        ("k_phidot", params.k_phidot),
    ])
    .with_uncertainty(move |x, u| &b_zeta * p.input_disturbance(x, u))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    #[test]
    fn three_d_nominal_hand_evaluation() {
        // x = (1, 0, 0), u = 0, θ = (0.4, 0.2, 0.1):
        // open drift = (−0.4, 1, 0); φ = (0.1, 0.1); Bφ = (0, 0.1, 0.2).
        let (nominal, _) = benchmark_3d(&ThreeDParams::default());
        let dx = nominal.rhs(&v(&[1.0, 0.0, 0.0]), &v(&[0.0, 0.0]));
        let expect = v(&[-0.4, 0.9, -0.2]);
        assert!((dx - expect).norm() < 1e-15);
    }

    #[test]
    fn three_d_zero_perturbation_has_zero_uncertainty() {
        let (_, truth) = benchmark_3d(&ThreeDParams::unperturbed([0.4, 0.2, 0.1]));
        for (x, u) in [
            (v(&[1.0, -2.0, 3.0]), v(&[0.5, -1.0])),
            (v(&[-7.0, 4.0, 0.1]), v(&[1.5, 1.5])),
        ] {
            assert_eq!(truth.uncertainty(&x, &u).norm(), 0.0);
        }
    }

    #[test]
    fn three_d_uncertainty_matches_closed_form() {
        // ζ = B̃(u − φ̃) − B(u − φ), expanded row by row; θ₁ is unperturbed.
        let p = ThreeDParams::default();
        let (_, truth) = benchmark_3d(&p);
        let x = v(&[1.3, -0.7, 2.1]);
        let u = v(&[0.4, -0.9]);
        let th = p.theta;
        let tt = p.perturbed_theta();
        let phi = [
            th[1] * x[2] + th[2] * x[0] * x[0],
            th[1] * x[1] + th[2] * x[0] * x[0],
        ];
        let phit = [
            tt[1] * x[2] + tt[2] * x[0] * x[0],
            tt[1] * x[1] + tt[2] * x[0] * x[0],
        ];
        let z2 = 0.5 * (u[0] - phit[0]) - (u[0] - phi[0]);
        let z3 = (u[0] - phit[0]) + 0.5 * (u[1] - phit[1]) - (u[0] - phi[0]) - (u[1] - phi[1]);
        let zeta = truth.uncertainty(&x, &u);
        assert!(zeta[0].abs() < 1e-15);
        assert!((zeta[1] - z2).abs() < 1e-14);
        assert!((zeta[2] - z3).abs() < 1e-14);
    }

    #[test]
    fn vtol_parameters_read_back() {
        let sys = benchmark_vtol(&VtolParams::default());
        assert_eq!(sys.param("mass"), Some(0.486));
        assert_eq!(sys.param("inertia"), Some(0.00383));
        assert_eq!(sys.param("gravity"), Some(9.81));
        assert_eq!(sys.param("arm"), Some(0.25));
    }

    #[test]
    fn vtol_hover_is_force_balanced() {
        let p = VtolParams::default();
        let sys = benchmark_vtol(&p).nominal();
        let h = p.hover_thrust();
        let dx = sys.rhs(&v(&[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]), &v(&[h, h]));
        assert!(dx[4].abs() < 1e-14);
        assert!(dx[5].abs() < 1e-14);
    }

    #[test]
    fn vtol_disturbance_hand_arithmetic() {
        let p = VtolParams::default();
        let d = p.input_disturbance(&v(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]), &v(&[1.0, 1.0]));
        assert!((d[0] - (-0.04 + 0.05 * 2f64.sqrt())).abs() < 1e-15);
        assert!((d[1] - 0.05 * 2f64.sqrt()).abs() < 1e-15);
    }
}
