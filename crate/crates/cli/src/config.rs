use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use collapse_sim_core::scenarios::{DetectorConfig, KernelChoice, MeasurementConfig, WindowFamily};
use collapse_sim_core::{Frame, IntegratorOptions, ScenarioConfig, Scheme};
use serde::de::{self, Deserializer, Visitor};
use serde::Deserialize;
use sha2::{Digest, Sha256};

/// A number written as a float, an integer or a fraction string like `"1/3"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

pub fn parse_fraction(s: &str) -> Option<f64> {
    let s = s.trim();
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b) = (a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?);
            (b != 0.0).then_some(a / b)
        }
        None => s.parse().ok(),
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Num;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or a fraction string such as \"1/3\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Num, E> {
                Ok(Num(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Num, E> {
                parse_fraction(v)
                    .map(Num)
                    .ok_or_else(|| E::custom(format!("cannot read {v:?} as a number or fraction")))
            }
        }
        d.deserialize_any(V)
    }
}

macro_rules! named {
    ($ty:ident, $inner:ty, $parse:expr, $what:literal) => {
        #[derive(Debug, Clone, Copy)]
        pub struct $ty(pub $inner);

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                $parse(&s)
                    .map($ty)
                    .ok_or_else(|| de::Error::custom(format!(concat!("unknown ", $what, " {:?}"), s)))
            }
        }
    };
}

named!(FrameName, Frame, Frame::parse, "frame");
named!(SchemeName, Scheme, Scheme::parse, "integrator scheme");

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum KernelName {
    LatticeVacuum,
    BoxVacuum,
    Squeezed,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    scheme: Option<SchemeName>,
    dt_factor: Option<f64>,
    symplectic_tol: Option<f64>,
    causality_courant: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    count: usize,
    from_in_pi: Num,
    to_in_pi: Num,
    width_in_pi: Num,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    name: String,
    omega: f64,
    lambda: f64,
    position_in_pi: Num,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSection {
    detector: String,
    #[serde(default = "one")]
    gain: f64,
    frame: Option<FrameName>,
    time_in_pi: Num,
}

fn one() -> f64 {
    1.0
}

fn first_slice() -> i32 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    name: String,
    amplitude: Num,
    half_width_in_pi: Num,
    dx_in_pi: Num,
    kernel: Option<KernelName>,
    squeeze: Option<f64>,
    #[serde(default = "first_slice")]
    compare_slice: i32,
    tolerance: Option<f64>,
    integrator: Option<IntegratorSection>,
    windows: Option<WindowSection>,
    detectors: Vec<DetectorSection>,
    #[serde(default)]
    measurements: Vec<MeasurementSection>,
}

#[derive(Debug)]
pub struct LoadedConfig {
    pub scenario: ScenarioConfig,
    /// SHA-256 of the file contents.
    pub hash: String,
}

pub fn hash_bytes(b: &[u8]) -> String {
    Sha256::digest(b).iter().map(|x| format!("{x:02x}")).collect()
}

pub fn parse(text: &str) -> Result<ScenarioConfig, String> {
    let f: FileConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    let defaults = IntegratorOptions::default();
    let integ = f.integrator.unwrap_or(IntegratorSection {
        scheme: None,
        dt_factor: None,
        symplectic_tol: None,
        causality_courant: None,
    });
    let dx = f.dx_in_pi.0 * PI;
    let windows = match f.windows {
        Some(w) => WindowFamily::evenly_spaced(w.count, w.from_in_pi.0 * PI, w.to_in_pi.0 * PI, w.width_in_pi.0 * PI),
        None => WindowFamily::evenly_spaced(9, -2.0 * PI, PI, 8.0 * dx),
    };
    let kernel = match (f.kernel.unwrap_or(KernelName::LatticeVacuum), f.squeeze) {
        (KernelName::Squeezed, Some(r)) => KernelChoice::Squeezed(r),
        (KernelName::Squeezed, None) => return Err("kernel = \"squeezed\" needs `squeeze`".into()),
        (_, Some(_)) => return Err("`squeeze` is only read with kernel = \"squeezed\"".into()),
        (KernelName::LatticeVacuum, None) => KernelChoice::LatticeVacuum,
        (KernelName::BoxVacuum, None) => KernelChoice::BoxVacuum,
    };
    let cfg = ScenarioConfig {
        name: f.name,
        amplitude: f.amplitude.0,
        half_width: f.half_width_in_pi.0 * PI,
        dx,
        detectors: f
            .detectors
            .into_iter()
            .map(|d| DetectorConfig {
                name: d.name,
                omega: d.omega,
                lambda: d.lambda,
                position: d.position_in_pi.0 * PI,
            })
            .collect(),
        kernel,
        measurements: f
            .measurements
            .into_iter()
            .map(|m| MeasurementConfig {
                detector: m.detector,
                gain: m.gain,
                frame: m.frame.map_or(Frame::T, |f| f.0),
                time: m.time_in_pi.0 * PI,
            })
            .collect(),
        compare_slice: f.compare_slice,
        windows,
        integrator: IntegratorOptions {
            dt_factor: integ.dt_factor.unwrap_or(defaults.dt_factor),
            scheme: integ.scheme.map_or(defaults.scheme, |s| s.0),
            symplectic_tol: integ.symplectic_tol.or(defaults.symplectic_tol),
        },
        tolerance: f.tolerance.unwrap_or(1e-2),
        causality_courant: integ.causality_courant.unwrap_or(0.995),
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<LoadedConfig, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| format!("{}: not UTF-8", path.display()))?;
    let scenario = parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(LoadedConfig {
        scenario,
        hash: hash_bytes(&bytes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundled(name: &str) -> ScenarioConfig {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        load(&path).unwrap().scenario
    }

    fn close(a: &ScenarioConfig, b: &ScenarioConfig) {
        let near = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1.0);
        assert_eq!(a.name, b.name);
        assert!(near(a.dx, b.dx) && near(a.half_width, b.half_width) && near(a.windows.width, b.windows.width));
        assert_eq!(a.windows.centers.len(), b.windows.centers.len());
        for (x, y) in a.windows.centers.iter().zip(&b.windows.centers) {
            assert!(near(*x, *y));
        }
        for (x, y) in a.measurements.iter().zip(&b.measurements) {
            assert!(x.detector == y.detector && x.frame == y.frame && near(x.time, y.time) && x.gain == y.gain);
        }
        for (x, y) in a.detectors.iter().zip(&b.detectors) {
            assert!(x.name == y.name && near(x.position, y.position) && x.lambda == y.lambda);
        }
        assert_eq!(
            (
                a.compare_slice,
                a.kernel,
                a.integrator,
                a.tolerance,
                a.causality_courant
            ),
            (
                b.compare_slice,
                b.kernel,
                b.integrator,
                b.tolerance,
                b.causality_courant
            )
        );
    }

    #[test]
    fn bundled_configs_match_presets() {
        close(&bundled("scenario_iv.cfg"), &ScenarioConfig::single_measurement());
        close(&bundled("two_successive.cfg"), &ScenarioConfig::two_successive());
        close(&bundled("spacelike_pair.cfg"), &ScenarioConfig::spacelike_pair());
        close(&bundled("timelike_pair.cfg"), &ScenarioConfig::timelike_pair());
    }

    #[test]
    fn fractions() {
        assert_eq!(parse_fraction("1/4"), Some(0.25));
        assert_eq!(parse_fraction(" -2 "), Some(-2.0));
        assert_eq!(parse_fraction("1/0"), None);
        assert_eq!(parse_fraction("pi"), None);
    }

    #[test]
    fn errors_name_the_key() {
        let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/scenario_iv.cfg"))
            .unwrap();
        let e = parse(&text.replace("time_in_pi = \"1/2\"", "time_in_pi = \"half\"")).unwrap_err();
        assert!(e.contains("time_in_pi") && e.contains("line"), "{e}");
        let e = parse(&text.replace("frame = \"t\"", "frame = \"tau\"")).unwrap_err();
        assert!(e.contains("unknown frame"), "{e}");
        let e = parse(&text.replace("amplitude = 0.5", "amplitude = 1.5")).unwrap_err();
        assert!(e.contains("1.5"), "{e}");
    }
}
