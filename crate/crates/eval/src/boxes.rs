//! Axis-aligned boxes, detections and ground truth.

/// Pixel-space box, `x2 >= x1` and `y2 >= y1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    /// Builds a box, swapping coordinates that arrive out of order.
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Intersection with `other`, or `None` when they do not overlap.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x2 > x1 && y2 > y1).then_some(BBox { x1, y1, x2, y2 })
    }
}

/// Intersection over union; 0 for disjoint or degenerate pairs.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let inter = a.intersect(b).map_or(0.0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    /// Class probability in `[0, 1]`.
    pub confidence: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

/// Treat ground truth as perfect detections with confidence 1.
pub fn as_detections(gts: &[GroundTruth]) -> Vec<Detection> {
    gts.iter()
        .map(|g| Detection {
            bbox: g.bbox,
            class: g.class,
            confidence: 1.0,
        })
        .collect()
}
