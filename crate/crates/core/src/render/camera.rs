use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera in the OpenCV convention: +x right, +y down, +z forward.
/// `pose` is the camera-to-world transform, row-major 3×4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: [[f64; 4]; 3],
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, s: f64) -> [f64; 3] {
        [
            self.origin[0] + s * self.direction[0],
            self.origin[1] + s * self.direction[1],
            self.origin[2] + s * self.direction[2],
        ]
    }
}

impl PinholeCamera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera resolution must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be > 0: fx={}, fy={}", self.fx, self.fy)));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Config(format!(
                "need far > near > 0: near={}, far={}",
                self.near, self.far
            )));
        }
        let r = |i: usize, j: usize| self.pose[i][j];
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|k| r(k, a) * r(k, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot - want).abs() >= 1e-5 {
                    return Err(Error::Config("camera rotation is not orthonormal".into()));
                }
            }
        }
        if self.pose.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("camera pose has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 3] {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Ray through continuous pixel coordinates; `(px, py)` addresses the
    /// pixel's top-left corner, so the ray passes through `(px+0.5, py+0.5)`.
    pub fn generate_ray(&self, px: f64, py: f64) -> Ray {
        let d = [(px + 0.5 - self.cx) / self.fx, (py + 0.5 - self.cy) / self.fy, 1.0];
        let mut w = [0.0; 3];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = self.pose[i][0] * d[0] + self.pose[i][1] * d[1] + self.pose[i][2] * d[2];
        }
        let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        Ray {
            origin: self.center(),
            direction: [w[0] / n, w[1] / n, w[2] / n],
            near: self.near,
            far: self.far,
        }
    }

    /// Ray through the centre of integer pixel `(x, y)`.
    pub fn pixel_ray(&self, x: u32, y: u32) -> Result<Ray> {
        if x >= self.width || y >= self.height {
            return Err(Error::Config(format!(
                "pixel ({x}, {y}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.generate_ray(x as f64, y as f64))
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Camera at `eye` looking at `target` with the given world up vector.
    pub fn look_at(width: u32, height: u32, focal: f64, eye: [f64; 3], target: [f64; 3], up: [f64; 3], near: f64, far: f64) -> Self {
        let f = normalize(sub(target, eye));
        // image y points down, so the camera's y axis is −up projected
        let x = normalize(cross(f, up));
        let y = cross(f, x);
        PinholeCamera {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            pose: [
                [x[0], y[0], f[0], eye[0]],
                [x[1], y[1], f[1], eye[1]],
                [x[2], y[2], f[2], eye[2]],
            ],
            near,
            far,
        }
    }
}

/// Axis-aligned scene box; field inputs are positions normalized to `[0,1]³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Aabb {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|k| !(self.max[k] > self.min[k])) {
            return Err(Error::Config(format!("degenerate scene bounds {self:?}")));
        }
        Ok(())
    }

    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        let mut o = [0.0; 3];
        for k in 0..3 {
            o[k] = (p[k] - self.min[k]) / (self.max[k] - self.min[k]);
        }
        o
    }

    pub fn denormalize(&self, q: [f64; 3]) -> [f64; 3] {
        let mut o = [0.0; 3];
        for k in 0..3 {
            o[k] = self.min[k] + q[k] * (self.max[k] - self.min[k]);
        }
        o
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Slab test clipped to the ray's own `[near, far]`.
    pub fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = ray.near;
        let mut t1 = ray.far;
        for k in 0..3 {
            let d = ray.direction[k];
            if d.abs() < 1e-12 {
                if ray.origin[k] < self.min[k] || ray.origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - ray.origin[k]) / d;
            let b = (self.max[k] - ray.origin[k]) / d;
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 > t0).then_some((t0, t1))
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(fx: f64, cx: f64) -> PinholeCamera {
        PinholeCamera {
            width: 8,
            height: 8,
            fx,
            fy: fx,
            cx,
            cy: cx,
            pose: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            near: 0.1,
            far: 5.0,
        }
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = PinholeCamera::look_at(32, 32, 40.0, [0.0, 0.0, -3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 0.5, 6.0);
        let r = cam.generate_ray(cam.cx - 0.5, cam.cy - 0.5);
        let axis = [cam.pose[0][2], cam.pose[1][2], cam.pose[2][2]];
        for k in 0..3 {
            assert!((r.direction[k] - axis[k]).abs() < 1e-12);
        }
        assert_eq!(r.origin, [0.0, 0.0, -3.0]);
        cam.validate().unwrap();
    }

    #[test]
    fn identity_pose_corner_case() {
        let r = ident(1.0, 0.0).generate_ray(-0.5, -0.5);
        assert_eq!(r.direction, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn adjacent_pixels_differ_by_inverse_focal() {
        let cam = ident(20.0, 4.0);
        let a = cam.generate_ray(2.0, 3.0).direction;
        let b = cam.generate_ray(3.0, 3.0).direction;
        // undo normalization: scale so z = 1
        let a = [a[0] / a[2], a[1] / a[2]];
        let b = [b[0] / b[2], b[1] / b[2]];
        assert!((b[0] - a[0] - 1.0 / 20.0).abs() < 1e-12);
        assert!((b[1] - a[1]).abs() < 1e-12);
    }

    #[test]
    fn look_at_image_up_is_world_up() {
        let cam = PinholeCamera::look_at(32, 32, 40.0, [0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 0.5, 6.0);
        // the top row of the image looks toward +y
        let top = cam.generate_ray(15.5, 0.0).direction;
        assert!(top[1] > 0.0);
    }

    #[test]
    fn validation_rejects_bad_cameras() {
        let mut c = ident(1.0, 0.0);
        c.fx = 0.0;
        assert!(c.validate().is_err());
        let mut c = ident(1.0, 0.0);
        c.far = 0.05;
        assert!(c.validate().is_err());
        let mut c = ident(1.0, 0.0);
        c.pose[0][0] = 1.1;
        assert!(c.validate().is_err());
        assert!(ident(1.0, 0.0).pixel_ray(8, 0).is_err());
    }

    #[test]
    fn aabb_clip_and_normalize() {
        let b = Aabb::cube(1.0);
        let r = Ray {
            origin: [0.0, 0.0, -3.0],
            direction: [0.0, 0.0, 1.0],
            near: 0.1,
            far: 10.0,
        };
        assert_eq!(b.clip(&r), Some((2.0, 4.0)));
        let miss = Ray {
            origin: [2.0, 0.0, -3.0],
            ..r
        };
        assert_eq!(b.clip(&miss), None);
        assert_eq!(b.normalize([0.0, -1.0, 1.0]), [0.5, 0.0, 1.0]);
        assert_eq!(b.denormalize([0.5, 0.0, 1.0]), [0.0, -1.0, 1.0]);
    }
}
