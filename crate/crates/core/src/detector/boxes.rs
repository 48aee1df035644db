use crate::data::BoundingBox;

/// Corner coordinates `[x_min, y_min, x_max, y_max]`.
pub type Coords = [f64; 4];

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    iou_coords(&a.coords(), &b.coords())
}

pub fn iou_coords(a: &Coords, b: &Coords) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area = |c: &Coords| (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn clip_to_image(c: &Coords, width: f64, height: f64) -> Coords {
    [
        c[0].clamp(0.0, width),
        c[1].clamp(0.0, height),
        c[2].clamp(0.0, width),
        c[3].clamp(0.0, height),
    ]
}

/// Log-space width/height box parameterization with per-component weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    /// Upper bound on decoded log-scale changes.
    pub scale_clip: f64,
}

impl BoxCoder {
    pub fn new(weights: [f64; 4]) -> Self {
        Self {
            weights,
            scale_clip: (1000.0f64 / 16.0).ln(),
        }
    }

    pub fn encode(&self, reference: &Coords, target: &Coords) -> [f64; 4] {
        let [wx, wy, ww, wh] = self.weights;
        let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (tw, th) = (target[2] - target[0], target[3] - target[1]);
        let rcx = reference[0] + 0.5 * rw;
        let rcy = reference[1] + 0.5 * rh;
        let tcx = target[0] + 0.5 * tw;
        let tcy = target[1] + 0.5 * th;
        [
            wx * (tcx - rcx) / rw,
            wy * (tcy - rcy) / rh,
            ww * (tw / rw).ln(),
            wh * (th / rh).ln(),
        ]
    }

    /// Inverse of [`encode`](Self::encode). Each edge moves by the centre
    /// offset plus half the size change, so zero deltas return `reference`
    /// bit for bit.
    pub fn decode(&self, reference: &Coords, deltas: &[f64; 4]) -> Coords {
        let [wx, wy, ww, wh] = self.weights;
        let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
        let ox = deltas[0] / wx * rw;
        let oy = deltas[1] / wy * rh;
        let w = rw * (deltas[2] / ww).min(self.scale_clip).exp();
        let h = rh * (deltas[3] / wh).min(self.scale_clip).exp();
        let hx = 0.5 * (w - rw);
        let hy = 0.5 * (h - rh);
        [
            reference[0] + ox - hx,
            reference[1] + oy - hy,
            reference[2] + ox + hx,
            reference[3] + oy + hy,
        ]
    }
}
