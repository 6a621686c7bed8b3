use super::dataset::Demonstration;
use super::render::Image;

/// Reflection of the unit cube along any subset of the axes. Both cameras
/// are orthographic and render symmetrically, so reflecting the scene is
/// the same as flipping the images: `x` flips the columns of both views,
/// `y` the rows of the top view and `z` the rows of the front view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Mirror {
    pub x: bool,
    pub y: bool,
    pub z: bool,
}

impl Mirror {
    pub const IDENTITY: Mirror = Mirror {
        x: false,
        y: false,
        z: false,
    };

    /// The eight reflections indexed by the low three bits of `bits`.
    pub fn from_bits(bits: u8) -> Self {
        Self {
            x: bits & 1 != 0,
            y: bits & 2 != 0,
            z: bits & 4 != 0,
        }
    }

    fn axes(self) -> [bool; 3] {
        [self.x, self.y, self.z]
    }

    pub fn point(self, p: [f32; 3]) -> [f32; 3] {
        let mut out = p;
        for (v, flip) in out.iter_mut().zip(self.axes()) {
            if flip {
                *v = 1.0 - *v;
            }
        }
        out
    }

    /// Applies the reflection to views, state and action deltas. The
    /// gripper channel is left alone.
    pub fn demonstration(self, demo: &Demonstration) -> Demonstration {
        if self == Self::IDENTITY {
            return demo.clone();
        }
        let mut out = demo.clone();
        let views = &mut out.observation.views;
        if let Some(front) = views.get_mut(0) {
            flip_image(front, self.z, self.x);
        }
        if let Some(top) = views.get_mut(1) {
            flip_image(top, self.y, self.x);
        }
        let flips = self.axes();
        for (v, &flip) in out.observation.state.iter_mut().zip(&flips) {
            if flip {
                *v = 1.0 - *v;
            }
        }
        let dim = out.actions.shape()[1];
        for row in out.actions.data_mut().chunks_mut(dim) {
            for (v, &flip) in row.iter_mut().zip(&flips) {
                if flip {
                    *v = -*v;
                }
            }
        }
        out
    }
}

pub fn flip_image(img: &mut Image, rows: bool, cols: bool) {
    let (h, w) = (img.height, img.width);
    let src = img.data.clone();
    for r in 0..h {
        let sr = if rows { h - 1 - r } else { r };
        for c in 0..w {
            let sc = if cols { w - 1 - c } else { c };
            let (d, s) = ((r * w + c) * 3, (sr * w + sc) * 3);
            img.data[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
}
