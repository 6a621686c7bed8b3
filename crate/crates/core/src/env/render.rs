use super::scene::{SceneSpec, EFFECTOR_COLOR};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = std::iter::repeat(rgb).take(height * width).flatten().collect();
        Self { height, width, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Draws a `side × side` square centered at `(row, col)`, clipped to the
    /// canvas.
    pub fn fill_square(&mut self, row: usize, col: usize, side: usize, rgb: [u8; 3]) {
        let half = side / 2;
        let r0 = row.saturating_sub(half);
        let c0 = col.saturating_sub(half);
        let r1 = (row + side - half).min(self.height);
        let c1 = (col + side - half).min(self.width);
        for r in r0..r1 {
            for c in c0..c1 {
                let i = (r * self.width + c) * 3;
                self.data[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedViews {
    /// Rows encode height `z` (top row is `z = 1`), columns encode `x`.
    pub front: Image,
    /// Rows encode `y`, columns encode `x`.
    pub top: Image,
}

impl RenderedViews {
    pub fn into_vec(self) -> Vec<Image> {
        vec![self.front, self.top]
    }
}

/// Half-up rounding of a unit coordinate onto `size` pixels.
pub(crate) fn to_pixel(v: f32, size: usize) -> usize {
    ((v * (size - 1) as f32) + 0.5).floor().clamp(0.0, (size - 1) as f32) as usize
}

pub(crate) fn front_pixel(p: [f32; 3], size: usize) -> (usize, usize) {
    (to_pixel(1.0 - p[2], size), to_pixel(p[0], size))
}

pub(crate) fn top_pixel(p: [f32; 3], size: usize) -> (usize, usize) {
    (to_pixel(p[1], size), to_pixel(p[0], size))
}

/// Orthographic front and top projections. Objects draw in list order,
/// then the effector.
pub fn render(scene: &SceneSpec, size: usize, square: usize) -> RenderedViews {
    let mut front = Image::filled(size, size, scene.background);
    let mut top = Image::filled(size, size, scene.background);
    let items = scene
        .objects
        .iter()
        .map(|o| (o.position, o.rgb()))
        .chain(std::iter::once((scene.effector, EFFECTOR_COLOR)));
    for (p, rgb) in items {
        let (r, c) = front_pixel(p, size);
        front.fill_square(r, c, square, rgb);
        let (r, c) = top_pixel(p, size);
        top.fill_square(r, c, square, rgb);
    }
    RenderedViews { front, top }
}
