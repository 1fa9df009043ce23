//! Flow visualization: direction as hue, magnitude as saturation, full value.

use std::path::Path;

use evaflow::flow::FlowField;

/// RGB of one flow vector. `max` is the magnitude drawn fully saturated;
/// zero flow is white.
pub fn flow_color(u: f64, v: f64, max: f64) -> [u8; 3] {
    let mag = u.hypot(v);
    let sat = if max > 0.0 { (mag / max).min(1.0) } else { 0.0 };
    if sat == 0.0 {
        return [255; 3];
    }
    let hue = v.atan2(u).to_degrees().rem_euclid(360.0);
    hsv_to_rgb(hue, sat, 1.0)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Binary 8-bit PPM bytes. Invalid pixels are black.
pub fn flow_ppm(flow: &FlowField, max_flow: Option<f64>) -> (Vec<u8>, f64) {
    let max = max_flow.unwrap_or_else(|| {
        (0..flow.u.len()).filter(|&i| flow.valid[i]).map(|i| flow.u[i].hypot(flow.v[i])).fold(0.0, f64::max)
    });
    let (w, h) = (flow.width(), flow.height());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for i in 0..w * h {
        let rgb = if flow.valid[i] { flow_color(flow.u[i], flow.v[i], max) } else { [0; 3] };
        out.extend_from_slice(&rgb);
    }
    (out, max)
}

/// Writes the color-wheel rendering to `path`; returns the magnitude used
/// for full saturation.
pub fn render_flow_image(flow: &FlowField, max_flow: Option<f64>, path: &Path) -> std::io::Result<f64> {
    let (bytes, max) = flow_ppm(flow, max_flow);
    std::fs::write(path, bytes)?;
    Ok(max)
}
