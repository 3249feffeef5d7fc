//! State-space geometry: a d-dimensional box and four quotient surfaces of
//! the square `[-1,1]^2`.
//!
//! Each quotient surface glues edges of the square:
//!
//! ```text
//! torus       (x,-1) ~ (x,1)    (-1,y) ~ (1,y)
//! moebius     (x,-1) ~ (-x,1)   coordinate 1 is a hard boundary
//! klein       (x,-1) ~ (-x,1)   (-1,y) ~ (1,y)
//! projective  (x,-1) ~ (-x,1)   (-1,y) ~ (1,-y)
//! ```
//!
//! Distances are the inherited quotient metrics: the Euclidean distance to
//! the nearest image of the second point under the identification group.
//! Because both points live in the fundamental square, images shifted by
//! more than one period are dominated by nearer ones, so minimizing over
//! shifts t ∈ {-1,0,1} per glued axis is exact.
//!
//! `wrap` maps a point that left the square after one motion step back to
//! its canonical representative and reports how a heading angle transforms
//! under the crossing. Headings are bearings: a heading φ moves a point
//! along (sin φ, cos φ), so an identification that negates coordinate k
//! negates the matching velocity component. Crossing a flip edge negates
//! sin (φ → -φ); crossing the projective plane's coordinate-1 edge negates
//! cos (φ → π-φ). Either single negation reverses orientation.

use thiserror::Error;

/// Positions live in `[-1,1]^d`; domain checks accept this much slop so
/// points that went through a long chain of float arithmetic still pass.
const DOMAIN_EPS: f64 = 1e-9;

const TAU: f64 = std::f64::consts::TAU;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point has dimension {got}, manifold expects {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("coordinate {index} = {value} outside [-1,1]")]
    OutOfDomain { index: usize, value: f64 },
}

/// The supported state-space geometries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifoldKind {
    /// `[-1,1]^d` with hard (clamping) boundaries.
    Box(usize),
    Torus,
    Moebius,
    ProjectivePlane,
    KleinBottle,
}

/// How a heading angle transforms after wrapping: which components of the
/// direction vector (sin φ, cos φ) get negated.
///
/// A single negation is orientation-reversing; negating both is a rotation
/// by π (orientation-preserving, occurs when two flip edges are crossed in
/// one step on the projective plane).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct HeadingTransform {
    pub negate_sin: bool,
    pub negate_cos: bool,
}

impl HeadingTransform {
    pub const IDENTITY: Self = HeadingTransform {
        negate_sin: false,
        negate_cos: false,
    };

    /// Apply to a heading, returning the equivalent angle in `[0, 2π)`.
    pub fn apply(&self, phi: f64) -> f64 {
        let raw = match (self.negate_sin, self.negate_cos) {
            (false, false) => phi,
            (true, false) => -phi,
            (false, true) => std::f64::consts::PI - phi,
            (true, true) => std::f64::consts::PI + phi,
        };
        normalize_angle(raw)
    }

    /// True when the transform reverses orientation (exactly one component
    /// negated), i.e. when an odd number of flip edges was crossed.
    pub fn is_orientation_reversing(&self) -> bool {
        self.negate_sin != self.negate_cos
    }
}

/// Result of mapping a point back into the fundamental domain.
#[derive(Clone, Debug, PartialEq)]
pub struct WrapResult {
    /// Canonical representative in `[-1,1]^d`.
    pub position: Vec<f64>,
    /// True iff an orientation-reversing edge was crossed an odd number of
    /// times. Redundant with `transform` but convenient for callers that
    /// only care about chirality.
    pub heading_flip: bool,
    /// Exact heading transform to apply to the agent's angle.
    pub transform: HeadingTransform,
}

impl ManifoldKind {
    pub fn dim(&self) -> usize {
        match self {
            ManifoldKind::Box(d) => *d,
            _ => 2,
        }
    }

    /// Quotient-metric distance between two points of the fundamental domain.
    ///
    /// Panics if a point has the wrong dimension or leaves `[-1,1]^d` by
    /// more than a float-slop margin: feeding unwrapped positions in here is
    /// a caller bug, not a recoverable condition.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.check_domain(a);
        self.check_domain(b);
        match self {
            ManifoldKind::Box(_) => {
                let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                sq.sqrt()
            }
            ManifoldKind::Torus => {
                let mut best = f64::INFINITY;
                for t1 in [-1.0, 0.0, 1.0] {
                    for t2 in [-1.0, 0.0, 1.0] {
                        let dx = a[0] - (b[0] + 2.0 * t1);
                        let dy = a[1] - (b[1] + 2.0 * t2);
                        best = best.min(dx * dx + dy * dy);
                    }
                }
                best.sqrt()
            }
            ManifoldKind::Moebius => {
                let mut best = f64::INFINITY;
                for t2 in [-1.0, 0.0, 1.0] {
                    let s = if t2 != 0.0 { -1.0 } else { 1.0 };
                    let dx = a[0] - s * b[0];
                    let dy = a[1] - (b[1] + 2.0 * t2);
                    best = best.min(dx * dx + dy * dy);
                }
                best.sqrt()
            }
            ManifoldKind::KleinBottle => {
                let mut best = f64::INFINITY;
                for t1 in [-1.0, 0.0, 1.0] {
                    for t2 in [-1.0, 0.0, 1.0] {
                        let s = if t2 != 0.0 { -1.0 } else { 1.0 };
                        let dx = a[0] - (s * b[0] + 2.0 * t1);
                        let dy = a[1] - (b[1] + 2.0 * t2);
                        best = best.min(dx * dx + dy * dy);
                    }
                }
                best.sqrt()
            }
            ManifoldKind::ProjectivePlane => {
                let mut best = f64::INFINITY;
                for t1 in [-1.0, 0.0, 1.0] {
                    for t2 in [-1.0, 0.0, 1.0] {
                        let s1 = if t2 != 0.0 { -1.0 } else { 1.0 };
                        let s2 = if t1 != 0.0 { -1.0 } else { 1.0 };
                        let dx = a[0] - (s1 * b[0] + 2.0 * t1);
                        let dy = a[1] - (s2 * b[1] + 2.0 * t2);
                        best = best.min(dx * dx + dy * dy);
                    }
                }
                best.sqrt()
            }
        }
    }

    /// Map a point that may have left the square after one motion step back
    /// into the fundamental domain, reporting the heading transform.
    ///
    /// Precondition: every coordinate is within one period of the domain
    /// (|c| < 3), which any single step of the dynamics guarantees.
    pub fn wrap(&self, raw: &[f64]) -> WrapResult {
        let mut p = raw.to_vec();
        let t = self.wrap_in_place(&mut p);
        WrapResult {
            position: p,
            heading_flip: t.is_orientation_reversing(),
            transform: t,
        }
    }

    /// Allocation-free wrap for inner loops; `p` is rewritten in place.
    pub fn wrap_in_place(&self, p: &mut [f64]) -> HeadingTransform {
        assert_eq!(p.len(), self.dim(), "wrap: wrong point dimension");
        for (i, c) in p.iter().enumerate() {
            assert!(
                c.abs() < 3.0,
                "wrap: coordinate {i} = {c} moved more than one period"
            );
        }
        let mut t = HeadingTransform::IDENTITY;
        match self {
            ManifoldKind::Box(_) => {
                for c in p.iter_mut() {
                    *c = c.clamp(-1.0, 1.0);
                }
            }
            ManifoldKind::Torus => {
                periodic(&mut p[0]);
                periodic(&mut p[1]);
            }
            ManifoldKind::Moebius => {
                // Glued axis first: its flip negates coordinate 1 before the
                // hard boundary clamps it.
                if periodic(&mut p[1]) {
                    p[0] = 0.0 - p[0];
                    t.negate_sin = !t.negate_sin;
                }
                p[0] = p[0].clamp(-1.0, 1.0);
            }
            ManifoldKind::KleinBottle => {
                periodic(&mut p[0]);
                if periodic(&mut p[1]) {
                    p[0] = 0.0 - p[0];
                    t.negate_sin = !t.negate_sin;
                }
            }
            ManifoldKind::ProjectivePlane => {
                if periodic(&mut p[0]) {
                    p[1] = 0.0 - p[1];
                    t.negate_cos = !t.negate_cos;
                }
                if periodic(&mut p[1]) {
                    p[0] = 0.0 - p[0];
                    t.negate_sin = !t.negate_sin;
                }
            }
        }
        t
    }

    /// Closed-form visualization embedding into R³.
    ///
    /// Returns `None` for the box, which has no embedding map. The
    /// projective plane maps onto Boy's surface via the Bryant–Kusner
    /// parametrization; its pre-inversion map has poles inside the disk
    /// whose ends the inversion sends to the origin, so non-finite
    /// intermediate values collapse to (0,0,0).
    pub fn embed3d(&self, p: &[f64]) -> Option<[f64; 3]> {
        self.check_domain(p);
        let pi = std::f64::consts::PI;
        match self {
            ManifoldKind::Box(_) => None,
            ManifoldKind::Torus => {
                let (x, y) = (p[0], p[1]);
                let ring = 2.0 + 0.75 * (pi * (x + 1.0)).cos();
                Some([
                    ring * (pi * (y + 1.0)).cos(),
                    ring * (pi * (y + 1.0)).sin(),
                    0.75 * (pi * (x + 1.0)).sin(),
                ])
            }
            ManifoldKind::Moebius => {
                let (x, y) = (p[0], p[1]);
                let half_turn = pi / 2.0 * (y + 1.0);
                let ring = 1.0 + x / 2.0 * half_turn.cos();
                Some([
                    ring * (pi * (y + 1.0)).cos(),
                    ring * (pi * (y + 1.0)).sin(),
                    x / 2.0 * half_turn.sin(),
                ])
            }
            ManifoldKind::KleinBottle => {
                // Pinched torus: a torus whose tube collapses at the seam.
                let (x, y) = (p[0], p[1]);
                let ring = 2.0 + 0.75 * (pi * (x + 1.0)).cos();
                Some([
                    ring * (pi * (y + 1.0)).cos(),
                    ring * (pi * (y + 1.0)).sin(),
                    0.75 * (pi * (x + 1.0)).sin() * (pi / 2.0 * (y + 1.0)).cos(),
                ])
            }
            ManifoldKind::ProjectivePlane => {
                let r = (p[0] + 1.0) / 2.0;
                let a = pi * (p[1] + 1.0);
                let z = C(r * a.cos(), r * a.sin());
                let z3 = z.mul(z).mul(z);
                let z4 = z3.mul(z);
                let z6 = z3.mul(z3);
                let denom = z6.add(z3.scale(5.0_f64.sqrt())).add(C(-1.0, 0.0));
                let w1 = z.mul(C(1.0, 0.0).sub(z4)).div(denom);
                let w2 = z.mul(C(1.0, 0.0).add(z4)).div(denom);
                let w3 = C(1.0, 0.0).add(z6).div(denom);
                let g1 = -1.5 * w1.1;
                let g2 = -1.5 * w2.0;
                let g3 = w3.1 - 0.5;
                let s = g1 * g1 + g2 * g2 + g3 * g3;
                let out = [g1 / s, g2 / s, g3 / s];
                if out.iter().all(|v| v.is_finite()) {
                    Some(out)
                } else {
                    Some([0.0, 0.0, 0.0])
                }
            }
        }
    }

    /// Validate a point against the manifold's domain, returning an error
    /// instead of panicking. Used at config/input boundaries.
    pub fn validate_point(&self, p: &[f64]) -> Result<(), GeometryError> {
        if p.len() != self.dim() {
            return Err(GeometryError::DimensionMismatch {
                got: p.len(),
                want: self.dim(),
            });
        }
        for (index, &value) in p.iter().enumerate() {
            if !(value.abs() <= 1.0 + DOMAIN_EPS) {
                return Err(GeometryError::OutOfDomain { index, value });
            }
        }
        Ok(())
    }

    fn check_domain(&self, p: &[f64]) {
        if let Err(e) = self.validate_point(p) {
            panic!("manifold domain violation: {e}");
        }
    }
}

/// Reduce one coordinate by a single period; returns whether an edge was
/// crossed. The negation form `0.0 - c` avoids producing -0.0.
fn periodic(c: &mut f64) -> bool {
    if *c > 1.0 {
        *c -= 2.0;
        true
    } else if *c < -1.0 {
        *c += 2.0;
        true
    } else {
        false
    }
}

/// Normalize an angle into `[0, 2π)`.
pub fn normalize_angle(phi: f64) -> f64 {
    let a = phi.rem_euclid(TAU);
    if a == TAU {
        0.0
    } else {
        a
    }
}

/// Distance between two angles on the circle, in `[0, π]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Minimal complex arithmetic for the Boy's surface map; not worth a
/// dependency for one function.
#[derive(Clone, Copy)]
struct C(f64, f64);

impl C {
    fn add(self, o: C) -> C {
        C(self.0 + o.0, self.1 + o.1)
    }
    fn sub(self, o: C) -> C {
        C(self.0 - o.0, self.1 - o.1)
    }
    fn mul(self, o: C) -> C {
        C(self.0 * o.0 - self.1 * o.1, self.0 * o.1 + self.1 * o.0)
    }
    fn scale(self, s: f64) -> C {
        C(self.0 * s, self.1 * s)
    }
    fn div(self, o: C) -> C {
        let n = o.0 * o.0 + o.1 * o.1;
        C(
            (self.0 * o.0 + self.1 * o.1) / n,
            (self.1 * o.0 - self.0 * o.1) / n,
        )
    }
}
