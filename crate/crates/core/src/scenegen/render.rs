use std::sync::Arc;

use crate::imagecore::{quantize, BinaryMask, ClassTable, Image, LabelMap, ValueRange};

use super::{DynamicObjectSpec, Layout, ObjectKind, Rgb, SamplePair, SceneSpec};

fn lerp(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn scale(c: Rgb, k: f32) -> Rgb {
    [c[0] * k, c[1] * k, c[2] * k]
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-pixel hash noise in `[0, 1)`.
fn noise(seed: u64, x: usize, y: usize) -> f32 {
    let h = splitmix(seed ^ splitmix((x as u64) << 32 | y as u64));
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Static background color and class at a pixel center given in frame fractions.
fn layout_pixel(layout: &Layout, fx: f32, fy: f32) -> (Rgb, u8) {
    if fy < layout.horizon {
        for b in &layout.buildings {
            if fx >= b.x0 && fx < b.x1 && fy >= b.top {
                let v = (fy - b.top) / (layout.horizon - b.top);
                let mut color = scale(b.facade, 1.0 - 0.12 * v);
                if let Some(win) = &b.windows {
                    let u = (fx - b.x0) / (b.x1 - b.x0);
                    // the ground floor stays plain
                    let vv = v / 0.85;
                    if vv < 1.0 {
                        let cu = (u * win.cols as f32).fract();
                        let cv = (vv * win.rows as f32).fract();
                        if (cu - 0.5).abs() < win.fill / 2.0 && (cv - 0.5).abs() < win.fill / 2.0 {
                            color = win.color;
                        }
                    }
                }
                return (color, ClassTable::BUILDING);
            }
        }
        let t = fy / layout.horizon;
        return (lerp(layout.sky_top, layout.sky_bottom, t), ClassTable::SKY);
    }
    if fy < layout.road_top {
        let curb = layout.road_top - fy < 0.02;
        let color = if curb { scale(layout.sidewalk, 0.82) } else { layout.sidewalk };
        return (color, ClassTable::SIDEWALK);
    }
    let t = (fy - layout.road_top) / (1.0 - layout.road_top);
    let mut color = lerp(layout.road_far, layout.road_near, t.clamp(0.0, 1.0));
    if let Some(lane) = &layout.lane {
        let period = lane.dash + lane.gap;
        let phase = (fx - lane.offset).rem_euclid(period);
        if (fy - lane.y).abs() < lane.thickness / 2.0 && phase < lane.dash {
            color = lane.color;
        }
    }
    (color, ClassTable::ROAD)
}

/// Silhouette membership in object-local coordinates: `u` across in `[0,1)`,
/// `v` up from the ground line in `[0,1)`.
fn silhouette(kind: ObjectKind, u: f32, v: f32) -> bool {
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return false;
    }
    match kind {
        ObjectKind::Vehicle => v < 0.55 || (0.2..0.8).contains(&u),
        ObjectKind::Pedestrian => {
            let legs = v < 0.45 && (0.25..0.75).contains(&u);
            let torso = (0.45..0.8).contains(&v) && (0.1..0.9).contains(&u);
            let head = ((u - 0.5) / 0.28).powi(2) + ((v - 0.9) / 0.1).powi(2) <= 1.0;
            legs || torso || head
        }
    }
}

/// Body shading inside the silhouette.
fn body_color(o: &DynamicObjectSpec, u: f32, v: f32, px: usize, py: usize) -> Rgb {
    let grain = 0.92 + 0.16 * noise(o.texture_seed, px, py);
    match o.kind {
        ObjectKind::Vehicle => {
            let wheel = v < 0.2 && ((0.1..0.3).contains(&u) || (0.7..0.9).contains(&u));
            if wheel {
                return [0.07, 0.07, 0.08];
            }
            if v >= 0.62 && (0.27..0.73).contains(&u) {
                return [0.22 * grain, 0.27 * grain, 0.33 * grain];
            }
            scale(o.color, grain)
        }
        ObjectKind::Pedestrian => {
            if v >= 0.8 {
                [0.82 * grain, 0.66 * grain, 0.55 * grain]
            } else if v < 0.45 {
                scale(o.color, 0.55 * grain)
            } else {
                scale(o.color, grain)
            }
        }
    }
}

struct ObjectFrame {
    left: f32,
    width: f32,
    base: f32,
    height: f32,
}

impl ObjectFrame {
    fn new(o: &DynamicObjectSpec, h: usize, w: usize) -> Self {
        Self {
            left: (o.center_x - o.width / 2.0) * w as f32,
            width: o.width * w as f32,
            base: o.base_y * h as f32,
            height: o.height * h as f32,
        }
    }

    fn local(&self, x: f32, y: f32) -> (f32, f32) {
        ((x - self.left) / self.width, (self.base - y) / self.height)
    }
}

struct Layers {
    static_rgb: Vec<Rgb>,
    dynamic_rgb: Vec<Rgb>,
    labels: Vec<u8>,
    body: Vec<u8>,
    shadow: Vec<u8>,
}

fn quantize_rgb(c: Rgb) -> [u8; 3] {
    [quantize(c[0]), quantize(c[1]), quantize(c[2])]
}

fn dequantize(q: [u8; 3]) -> Rgb {
    [q[0] as f32 / 255.0, q[1] as f32 / 255.0, q[2] as f32 / 255.0]
}

fn render_layers(spec: &SceneSpec) -> Layers {
    let (h, w) = (spec.height, spec.width);
    let mut static_q = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    for py in 0..h {
        for px in 0..w {
            let (c, l) = layout_pixel(&spec.layout, (px as f32 + 0.5) / w as f32, (py as f32 + 0.5) / h as f32);
            static_q.push(quantize_rgb(c));
            labels.push(l);
        }
    }

    let frames: Vec<ObjectFrame> = spec.objects.iter().map(|o| ObjectFrame::new(o, h, w)).collect();

    // shadows: union of sheared silhouettes, darkened once
    let (dx, dy) = spec.sun.direction;
    let reach = spec.sun.length;
    let darken = 1.0 - spec.sun.opacity;
    let mut dynamic_q = static_q.clone();
    let mut shadow = vec![0u8; h * w];
    for (o, f) in spec.objects.iter().zip(&frames) {
        if !o.casts_shadow || dy * reach <= 0.0 {
            continue;
        }
        for py in 0..h {
            let cy = py as f32 + 0.5;
            if cy < f.base {
                continue;
            }
            let t = (cy - f.base) / (dy * reach);
            if t >= f.height {
                continue;
            }
            for px in 0..w {
                let sx = px as f32 + 0.5 - t * dx * reach;
                let (u, v) = f.local(sx, f.base - t);
                if silhouette(o.kind, u, v) {
                    shadow[py * w + px] = 1;
                }
            }
        }
    }
    for i in 0..h * w {
        if shadow[i] == 1 {
            dynamic_q[i] = quantize_rgb(scale(dequantize(static_q[i]), darken));
        }
    }

    // bodies in painter's order
    let mut body = vec![0u8; h * w];
    for (o, f) in spec.objects.iter().zip(&frames) {
        let y0 = (f.base - f.height).floor().max(0.0) as usize;
        let y1 = (f.base.ceil() as usize).min(h);
        let x0 = f.left.floor().max(0.0) as usize;
        let x1 = ((f.left + f.width).ceil().max(0.0) as usize).min(w);
        for py in y0..y1 {
            for px in x0..x1 {
                let (u, v) = f.local(px as f32 + 0.5, py as f32 + 0.5);
                if silhouette(o.kind, u, v) {
                    let i = py * w + px;
                    let mut q = quantize_rgb(body_color(o, u, v, px, py));
                    // a body pixel must be distinguishable from the background
                    if q == static_q[i] {
                        q[2] = if q[2] > 0 { q[2] - 1 } else { 1 };
                    }
                    dynamic_q[i] = q;
                    labels[i] = o.kind.class_index();
                    body[i] = 1;
                }
            }
        }
    }
    // visible shadow: darkened, not covered by a body, and actually changed
    for i in 0..h * w {
        if shadow[i] == 1 && (body[i] == 1 || dynamic_q[i] == static_q[i]) {
            shadow[i] = 0;
        }
    }
    Layers {
        static_rgb: static_q.into_iter().map(dequantize).collect(),
        dynamic_rgb: dynamic_q.into_iter().map(dequantize).collect(),
        labels,
        body,
        shadow,
    }
}

fn planar(pixels: &[Rgb], h: usize, w: usize) -> Image {
    let p = h * w;
    let mut data = vec![0.0; 3 * p];
    for (i, c) in pixels.iter().enumerate() {
        for ch in 0..3 {
            data[ch * p + i] = c[ch];
        }
    }
    Image::from_raw(h, w, 3, ValueRange::Unit, data)
}

/// Render the static and dynamic views of a scene with labels and mask.
pub fn render_pair(spec: &SceneSpec) -> SamplePair {
    let layers = render_layers(spec);
    let (h, w) = (spec.height, spec.width);
    SamplePair {
        id: String::new(),
        dynamic_img: planar(&layers.dynamic_rgb, h, w),
        static_img: planar(&layers.static_rgb, h, w),
        labels: LabelMap::from_raw(h, w, layers.labels, Arc::new(ClassTable::urban())),
        mask: BinaryMask::from_raw(h, w, layers.body),
        real: false,
    }
}

/// Static view only.
pub fn render_static(spec: &SceneSpec) -> Image {
    let layers = render_layers(spec);
    planar(&layers.static_rgb, spec.height, spec.width)
}

/// Pixels darkened by a visible shadow (never overlapping an object body).
pub fn render_shadow_mask(spec: &SceneSpec) -> BinaryMask {
    let layers = render_layers(spec);
    BinaryMask::from_raw(spec.height, spec.width, layers.shadow)
}
