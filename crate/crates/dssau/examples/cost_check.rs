use dssau::biometry::*;
use dssau::synth::rasterize;

fn scene(size: f64, ps_a: f64, ps_b: f64, r: f64, d: f64, phi_deg: f64) -> (Ellipse, Ellipse, f64) {
    let phi = phi_deg.to_radians();
    let ps = Ellipse { cx: size*0.3, cy: size*0.3, semi_major: ps_a, semi_minor: ps_b, angle: phi };
    let p = (ps.cx + ps_a*phi.cos(), ps.cy + ps_a*phi.sin());
    let fh = Ellipse { cx: p.0 + d*phi.cos(), cy: p.1 + d*phi.sin(), semi_major: r, semi_minor: r, angle: 0.0 };
    (ps, fh, 180.0 - (r/d).asin().to_degrees())
}

fn main() {
    for (canvas, ps_a, ps_b, r, d, phi) in [
        (192usize, 14.0, 5.0, 24.0, 48.0, 40.0),
        (256, 28.0, 10.0, 32.0, 64.0, 40.0),
        (256, 36.0, 13.0, 36.0, 72.0, 35.0),
        (320, 44.0, 16.0, 44.0, 88.0, 40.0),
        (448, 60.0, 22.0, 60.0, 120.0, 38.0),
    ] {
        let (ps, fh, expect) = scene(canvas as f64, ps_a, ps_b, r, d, phi);
        let mask = rasterize(&ps, &fh, canvas);
        match compute_biometry(&mask) {
            Ok(res) => {
                println!("canvas {canvas} ps {ps_a}x{ps_b}: aop {:.3} vs {:.3} (err {:+.3}); fitted ps angle {:.3} vs {:.3} deg; fitted a {:.2} vs {ps_a}",
                    res.aop_deg, expect, res.aop_deg - expect,
                    res.ps_ellipse.angle.to_degrees(), phi,
                    res.ps_ellipse.semi_major);
            }
            Err(e) => println!("canvas {canvas}: {e}"),
        }
    }
}
