use std::f64::consts::PI;
use std::io::Write;

use collapse_sim_core::Chart64;

/// Constant-eta and constant-xi curves over `t in [0, pi]`,
/// `x in [-2 pi, pi]`, as rows `family,t,x,eta,xi`.
pub fn write_grid<W: Write>(chart: &Chart64, lines: usize, samples: usize, mut w: W) -> Result<(), String> {
    let io = |e: std::io::Error| e.to_string();
    writeln!(w, "family,t,x,eta,xi").map_err(io)?;
    let lin = |a: f64, b: f64, n: usize, k: usize| a + (b - a) * k as f64 / n as f64;
    for k in 0..=lines {
        let eta = lin(0.0, PI, lines, k);
        for j in 0..=samples {
            let xi = lin(-2.0 * PI, PI, samples, j);
            let (t, x) = chart.from_alt(eta, xi).map_err(|e| e.to_string())?;
            writeln!(w, "eta,{t:e},{x:e},{eta:e},{xi:e}").map_err(io)?;
        }
    }
    for k in 0..=3 * lines {
        let xi = lin(-2.0 * PI, PI, 3 * lines, k);
        for j in 0..=samples {
            let eta = lin(0.0, PI, samples, j);
            let (t, x) = chart.from_alt(eta, xi).map_err(|e| e.to_string())?;
            writeln!(w, "xi,{t:e},{x:e},{eta:e},{xi:e}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
