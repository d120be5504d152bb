//! Quaternion and vector math for pose handling (binary64 throughout).

pub type Vec3 = [f64; 3];

/// Unit quaternion in (x, y, z, w) component order, matching the recording schema.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { x: 0.0, y: 0.0, z: 0.0, w: 1.0 };

    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Self {
        Quat { x, y, z, w }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat::new(self.x / n, self.y / n, self.z / n, self.w / n)
    }

    pub fn conjugate(&self) -> Quat {
        Quat::new(-self.x, -self.y, -self.z, self.w)
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z + self.w * o.w
    }

    /// Hamilton product self * o (apply o first, then self).
    pub fn mul(&self, o: &Quat) -> Quat {
        Quat::new(
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
        )
    }

    /// Rotates a vector by this quaternion (assumed unit).
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        // t = 2 q_v x v; v' = v + w t + q_v x t
        let q = [self.x, self.y, self.z];
        let t = scale(cross(q, v), 2.0);
        add(add(v, scale(t, self.w)), cross(q, t))
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let half = 0.5 * angle;
        let s = half.sin();
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        Quat::new(
            axis[0] / n * s,
            axis[1] / n * s,
            axis[2] / n * s,
            half.cos(),
        )
    }

    /// Rotation about the world vertical (y) axis.
    pub fn about_y(angle: f64) -> Quat {
        let half = 0.5 * angle;
        Quat::new(0.0, half.sin(), 0.0, half.cos())
    }

    /// Forward direction of the pose: the rotated -z axis (y-up convention).
    pub fn forward(&self) -> Vec3 {
        self.rotate([0.0, 0.0, -1.0])
    }
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Yaw (rotation about world y) of an orientation, via the horizontal
/// projection of its forward vector. Returns `fallback` when the forward
/// vector is within `eps` of vertical.
pub fn yaw_of(q: &Quat, eps: f64, fallback: f64) -> f64 {
    let f = q.forward();
    let horiz = (f[0] * f[0] + f[2] * f[2]).sqrt();
    if horiz < eps {
        fallback
    } else {
        // R_y(theta) maps -z onto (-sin theta, 0, -cos theta)
        (-f[0]).atan2(-f[2])
    }
}
