//! Minimal raster drawing for kernel plots. Coordinates are in source-image
//! pixels and scaled by `zoom`.

use blurfield::image::Image;

pub struct Canvas {
    img: Image,
    zoom: f64,
}

impl Canvas {
    pub fn new(width: usize, height: usize, zoom: f64) -> Self {
        Self {
            img: Image::filled(width, height, [0.05, 0.05, 0.07]),
            zoom,
        }
    }

    fn blend(&mut self, x: i64, y: i64, c: [f64; 3], a: f32) {
        if x < 0 || y < 0 || x as usize >= self.img.width() || y as usize >= self.img.height() {
            return;
        }
        let (x, y) = (x as usize, y as usize);
        let old = self.img.get(x, y);
        let mix = |o: f32, n: f64| o * (1.0 - a) + n as f32 * a;
        self.img.set(x, y, [mix(old[0], c[0]), mix(old[1], c[1]), mix(old[2], c[2])]);
    }

    /// Filled disk of `radius` source pixels.
    pub fn dot(&mut self, p: [f64; 2], radius: f64, c: [f64; 3], alpha: f32) {
        let (cx, cy, r) = (p[0] * self.zoom, p[1] * self.zoom, radius * self.zoom);
        let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.blend(x, y, c, alpha);
                }
            }
        }
    }

    pub fn line(&mut self, a: [f64; 2], b: [f64; 2], c: [f64; 3]) {
        let (ax, ay) = (a[0] * self.zoom, a[1] * self.zoom);
        let (bx, by) = (b[0] * self.zoom, b[1] * self.zoom);
        let steps = (bx - ax).abs().max((by - ay).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.blend((ax + t * (bx - ax)) as i64, (ay + t * (by - ay)) as i64, c, 1.0);
        }
    }

    pub fn cross(&mut self, p: [f64; 2], c: [f64; 3]) {
        let arm = 0.3;
        self.line([p[0] - arm, p[1]], [p[0] + arm, p[1]], c);
        self.line([p[0], p[1] - arm], [p[0], p[1] + arm], c);
    }

    pub fn into_image(self) -> Image {
        self.img
    }
}
