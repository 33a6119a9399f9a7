//! Parametric three-span bridge facades and their rasterization.
//!
//! Drawings are black strokes on white. The 300 m total length maps onto the
//! image width minus a side margin (6 px at 192 px wide, 0.6 px/m); vertical
//! geometry is laid out for a 48 px tall canvas and scaled to other heights.
//! Only the left half is drawn and then mirrored, so every image is exactly
//! symmetric about its vertical centerline.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::{RasterImage, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Beam,
    Arch,
    CableStayed,
    Suspension,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtype {
    EqualSectionBeam,
    VPierRigidFrame,
    TopBearingArch,
    BottomBearingArch,
    HarpCableStayed,
    FanCableStayed,
    VerticalSlingSuspension,
    DiagonalSlingSuspension,
}

impl Subtype {
    pub const ALL: [Subtype; 8] = [
        Subtype::EqualSectionBeam,
        Subtype::VPierRigidFrame,
        Subtype::TopBearingArch,
        Subtype::BottomBearingArch,
        Subtype::HarpCableStayed,
        Subtype::FanCableStayed,
        Subtype::VerticalSlingSuspension,
        Subtype::DiagonalSlingSuspension,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Subtype::EqualSectionBeam => "equal_section_beam",
            Subtype::VPierRigidFrame => "v_pier_rigid_frame",
            Subtype::TopBearingArch => "top_bearing_arch",
            Subtype::BottomBearingArch => "bottom_bearing_arch",
            Subtype::HarpCableStayed => "harp_cable_stayed",
            Subtype::FanCableStayed => "fan_cable_stayed",
            Subtype::VerticalSlingSuspension => "vertical_sling_suspension",
            Subtype::DiagonalSlingSuspension => "diagonal_sling_suspension",
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Subtype::EqualSectionBeam | Subtype::VPierRigidFrame => Family::Beam,
            Subtype::TopBearingArch | Subtype::BottomBearingArch => Family::Arch,
            Subtype::HarpCableStayed | Subtype::FanCableStayed => Family::CableStayed,
            Subtype::VerticalSlingSuspension | Subtype::DiagonalSlingSuspension => {
                Family::Suspension
            }
        }
    }

    fn index(&self) -> u64 {
        Subtype::ALL.iter().position(|s| s == self).expect("listed") as u64
    }

    /// Deck top row, rise and member count at a 48 px tall canvas.
    fn nominal(&self) -> (f64, f64, u32) {
        match self {
            Subtype::EqualSectionBeam => (20.0, 0.0, 0),
            Subtype::VPierRigidFrame => (20.0, 10.0, 0),
            Subtype::TopBearingArch => (12.0, 30.0, 4),
            Subtype::BottomBearingArch => (34.0, 26.0, 5),
            Subtype::HarpCableStayed | Subtype::FanCableStayed => (32.0, 23.0, 5),
            Subtype::VerticalSlingSuspension | Subtype::DiagonalSlingSuspension => {
                (32.0, 25.0, 6)
            }
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subtype::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown bridge subtype `{s}`")))
    }
}

impl Family {
    /// (side, main, side) span lengths in meters.
    pub fn spans_m(&self) -> (f64, f64, f64) {
        match self {
            Family::Beam => (80.0, 140.0, 80.0),
            _ => (67.0, 166.0, 67.0),
        }
    }
}

/// Offsets applied to the nominal geometry of a subtype.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub deck_dy: i64,
    pub rise_scale: f64,
    pub cable_delta: i64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        deck_dy: 0,
        rise_scale: 1.0,
        cable_delta: 0,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeSpec {
    pub family: Family,
    pub subtype: Subtype,
    pub span_m: (f64, f64, f64),
    /// Top row of the deck.
    pub deck_y: i64,
    /// Tower height above the deck, arch rise, or V-pier half spread.
    pub tower_or_arch_rise_px: i64,
    pub member_thickness_px: u32,
    /// Cables, hangers or spandrel columns per half span.
    pub cable_count: u32,
    pub jitter: Jitter,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one dataset image.
pub fn variant_seed(subtype: Subtype, variant_index: u64, master_seed: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ subtype.index()) ^ variant_index)
}

fn build(subtype: Subtype, jitter: Jitter, thickness: u32, seed: u64, width: usize, height: usize) -> BridgeSpec {
    let v = height as f64 / DEFAULT_HEIGHT as f64;
    let u = width as f64 / DEFAULT_WIDTH as f64;
    let (deck, rise, count) = subtype.nominal();
    let rise = if subtype == Subtype::VPierRigidFrame {
        rise * u
    } else {
        rise * v
    };
    BridgeSpec {
        family: subtype.family(),
        subtype,
        span_m: subtype.family().spans_m(),
        deck_y: (deck * v).round() as i64 + jitter.deck_dy,
        tower_or_arch_rise_px: (rise * jitter.rise_scale).round() as i64,
        member_thickness_px: thickness,
        cable_count: if count == 0 {
            0
        } else {
            (count as i64 + jitter.cable_delta).max(1) as u32
        },
        jitter,
        seed,
        width,
        height,
    }
}

/// Un-jittered geometry of a subtype.
pub fn nominal_spec(subtype: Subtype, width: usize, height: usize) -> BridgeSpec {
    build(subtype, Jitter::NONE, 2, 0, width, height)
}

/// Jittered spec at the default 192x48 size.
pub fn generate_spec(subtype: Subtype, variant_index: u64, master_seed: u64) -> BridgeSpec {
    generate_spec_sized(subtype, variant_index, master_seed, DEFAULT_WIDTH, DEFAULT_HEIGHT)
}

/// Deck elevation ±2 px (scaled with height), rise ±15%, thickness 1 or 2 px,
/// member count ±1. All parameters are shared by both halves.
pub fn generate_spec_sized(
    subtype: Subtype,
    variant_index: u64,
    master_seed: u64,
    width: usize,
    height: usize,
) -> BridgeSpec {
    let seed = variant_seed(subtype, variant_index, master_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_dy = ((2.0 * height as f64 / DEFAULT_HEIGHT as f64).round() as i64).max(1);
    let jitter = Jitter {
        deck_dy: rng.gen_range(-max_dy..=max_dy),
        rise_scale: rng.gen_range(0.85..=1.15),
        cable_delta: rng.gen_range(-1..=1),
    };
    let thickness = rng.gen_range(1..=2);
    build(subtype, jitter, thickness, seed, width, height)
}

struct Layout {
    w: i64,
    h: i64,
    margin: f64,
    px_per_m: f64,
    /// Continuous centerline, `(w - 1) / 2`.
    center: f64,
}

impl Layout {
    fn new(width: usize, height: usize) -> Self {
        let margin = (6.0 * width as f64 / DEFAULT_WIDTH as f64).round();
        Layout {
            w: width as i64,
            h: height as i64,
            margin,
            px_per_m: (width as f64 - 2.0 * margin) / 300.0,
            center: (width as f64 - 1.0) / 2.0,
        }
    }

    fn x_at(&self, meters: f64) -> f64 {
        self.margin + meters * self.px_per_m
    }
}

fn out_of_canvas(param: &str, detail: String) -> Error {
    Error::Invalid(format!("`{param}` puts geometry outside the canvas: {detail}"))
}

/// Evenly spaced interior points between `a` and `b`, `n` of them.
fn interior(a: f64, b: f64, n: u32) -> impl Iterator<Item = f64> {
    (1..=n).map(move |k| a + (b - a) * k as f64 / (n + 1) as f64)
}

pub fn render(spec: &BridgeSpec) -> Result<RasterImage> {
    let (width, height) = (spec.width, spec.height);
    if width < 16 || height < 8 {
        return Err(Error::Invalid(format!("canvas {width}x{height} too small")));
    }
    let l = Layout::new(width, height);
    let t = spec.member_thickness_px;
    if !(1..=2).contains(&t) {
        return Err(Error::Invalid(format!(
            "`member_thickness_px` must be 1 or 2, got {t}"
        )));
    }
    let deck_t = t as i64 + 1;
    let deck_top = spec.deck_y;
    let deck_bottom = deck_top + deck_t - 1;
    let ground = l.h - 1;
    if deck_top < 0 || deck_bottom >= ground {
        return Err(out_of_canvas("deck_y", format!("deck rows {deck_top}..={deck_bottom}")));
    }
    let rise = spec.tower_or_arch_rise_px;
    if rise < 0 {
        return Err(out_of_canvas("tower_or_arch_rise_px", format!("negative rise {rise}")));
    }

    let mut img = RasterImage::new(width, height);
    let half_end = l.center.floor() as i64 + 1;
    let (side, _, _) = spec.span_m;
    let support = l.x_at(side).floor();
    let xs = support as i64;
    let n = spec.cable_count;
    let ti = t as i64;

    // deck spans the full width
    for row in deck_top..=deck_bottom {
        for x in 0..l.w {
            img.ink(x, row);
        }
    }

    match spec.subtype {
        Subtype::EqualSectionBeam => {
            img.fill_rect(xs, deck_bottom + 1, xs + ti - 1, ground);
        }
        Subtype::VPierRigidFrame => {
            if xs - rise < 0 {
                return Err(out_of_canvas("tower_or_arch_rise_px", format!("V spread {rise}")));
            }
            // haunched girder over the pier
            img.fill_rect(xs - rise, deck_bottom + 1, xs + rise, deck_bottom + 2);
            img.line((xs, ground), (xs - rise, deck_bottom), t);
            img.line((xs, ground), (xs + rise, deck_bottom), t);
        }
        Subtype::TopBearingArch => {
            let spring = ground as f64;
            let crown = spring - rise as f64;
            if crown < 0.0 {
                return Err(out_of_canvas("tower_or_arch_rise_px", format!("arch crown row {crown}")));
            }
            let arch = |x: f64| {
                crown + (spring - crown) * ((x - l.center) / (support - l.center)).powi(2)
            };
            img.curve(xs, half_end, t, arch);
            img.fill_rect(xs, deck_bottom + 1, xs + ti - 1, ground);
            for x in interior(support, l.center, n) {
                let xi = x.round() as i64;
                img.line((xi, deck_bottom + 1), (xi, arch(xi as f64).round() as i64), 1);
            }
        }
        Subtype::BottomBearingArch => {
            let spring = deck_top as f64;
            let crown = spring - rise as f64;
            if crown < 0.0 {
                return Err(out_of_canvas("tower_or_arch_rise_px", format!("arch crown row {crown}")));
            }
            let arch = |x: f64| {
                crown + (spring - crown) * ((x - l.center) / (support - l.center)).powi(2)
            };
            img.curve(xs, half_end, t, arch);
            img.fill_rect(xs, deck_bottom + 1, xs + ti - 1, ground);
            for x in interior(support, l.center, n) {
                let xi = x.round() as i64;
                img.line((xi, arch(xi as f64).round() as i64), (xi, deck_top - 1), 1);
            }
        }
        Subtype::HarpCableStayed | Subtype::FanCableStayed => {
            let top = deck_top - rise;
            if top < 0 {
                return Err(out_of_canvas("tower_or_arch_rise_px", format!("tower top row {top}")));
            }
            img.fill_rect(xs, top, xs + ti - 1, ground);
            let reach = 0.9 * (support - l.margin).min(l.center - support);
            let harp = spec.subtype == Subtype::HarpCableStayed;
            for k in 1..=n {
                let frac = k as f64 / n as f64;
                let dx = (reach * frac).round() as i64;
                let anchor = if harp {
                    deck_top - (0.9 * rise as f64 * frac).round() as i64
                } else {
                    top + 1
                };
                img.line((xs, anchor), (xs - dx, deck_top - 1), 1);
                img.line((xs + ti - 1, anchor), (xs + ti - 1 + dx, deck_top - 1), 1);
            }
        }
        Subtype::VerticalSlingSuspension | Subtype::DiagonalSlingSuspension => {
            let top = deck_top - rise;
            if top < 0 {
                return Err(out_of_canvas("tower_or_arch_rise_px", format!("tower top row {top}")));
            }
            img.fill_rect(xs, top, xs + ti - 1, ground);
            let sag = (deck_top - 2).max(top) as f64;
            let cable = |x: f64| {
                sag + (top as f64 - sag) * ((x - l.center) / (support - l.center)).powi(2)
            };
            img.curve(xs, half_end, 1, cable);
            // back stay to the anchorage at the deck end
            img.line((xs, top), (l.margin as i64, deck_top - 1), 1);
            let pts: Vec<i64> = interior(support, l.center, n).map(|x| x.round() as i64).collect();
            let at_cable = |x: i64| cable(x as f64).round() as i64;
            if spec.subtype == Subtype::VerticalSlingSuspension {
                for &x in &pts {
                    img.line((x, at_cable(x)), (x, deck_top - 1), 1);
                }
            } else {
                let mut stops = vec![xs + ti];
                stops.extend(&pts);
                stops.push(half_end);
                for (k, pair) in stops.windows(2).enumerate() {
                    let (a, b) = (pair[0], pair[1]);
                    if k % 2 == 0 {
                        img.line((a, at_cable(a)), (b, deck_top - 1), 1);
                    } else {
                        img.line((a, deck_top - 1), (b, at_cable(b)), 1);
                    }
                }
            }
        }
    }

    img.symmetrize();
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::raster::INK;

    #[test]
    fn spec_is_deterministic() {
        let a = generate_spec(Subtype::EqualSectionBeam, 0, 42);
        assert_eq!(a, generate_spec(Subtype::EqualSectionBeam, 0, 42));
        assert_ne!(a.seed, generate_spec(Subtype::EqualSectionBeam, 1, 42).seed);
    }

    #[test]
    fn spans_follow_family() {
        assert_eq!(generate_spec(Subtype::EqualSectionBeam, 3, 1).span_m, (80.0, 140.0, 80.0));
        assert_eq!(generate_spec(Subtype::VPierRigidFrame, 3, 1).span_m, (80.0, 140.0, 80.0));
        assert_eq!(generate_spec(Subtype::HarpCableStayed, 3, 1).span_m, (67.0, 166.0, 67.0));
        for s in &Subtype::ALL[2..] {
            assert_eq!(generate_spec(*s, 0, 9).span_m, (67.0, 166.0, 67.0));
        }
    }

    #[test]
    fn unknown_subtype_rejected() {
        assert!("truss".parse::<Subtype>().is_err());
        for s in Subtype::ALL {
            assert_eq!(s.name().parse::<Subtype>().unwrap(), s);
        }
    }

    #[test]
    fn jitter_stays_in_range() {
        for s in Subtype::ALL {
            for i in 0..200 {
                let spec = generate_spec(s, i, 5);
                assert!((-2..=2).contains(&spec.jitter.deck_dy));
                assert!((0.85..=1.15).contains(&spec.jitter.rise_scale));
                assert!((1..=2).contains(&spec.member_thickness_px));
                assert!((-1..=1).contains(&spec.jitter.cable_delta));
            }
        }
    }

    #[test]
    fn renders_are_symmetric_and_mostly_background() {
        let mut min_bg: f64 = 1.0;
        for i in 0..100u64 {
            let s = Subtype::ALL[(i % 8) as usize];
            let img = render(&generate_spec(s, i, 1234)).unwrap();
            assert!(img.is_mirror_symmetric());
            min_bg = min_bg.min(img.background_fraction());
        }
        assert!(min_bg > 0.7, "min background fraction {min_bg}");
    }

    #[test]
    fn beam_has_full_deck_and_two_piers() {
        let spec = nominal_spec(Subtype::EqualSectionBeam, 192, 48);
        let img = render(&spec).unwrap();
        assert!((0..192).all(|x| img.get(x, spec.deck_y as usize) == INK));
        let below = spec.deck_y as usize + spec.member_thickness_px as usize + 1;
        let inked: Vec<bool> = (0..192)
            .map(|x| (below..48).any(|y| img.get(x, y) == INK))
            .collect();
        let mut runs = Vec::new();
        let mut x = 0;
        while x < 192 {
            if inked[x] {
                let start = x;
                while x < 192 && inked[x] {
                    x += 1;
                }
                runs.push((start, x - 1));
            } else {
                x += 1;
            }
        }
        assert_eq!(runs.len(), 2, "{runs:?}");
        // 6 px margin + 80 m * 0.6 px/m
        assert_eq!(runs[0].0, 54);
        assert_eq!(runs[1].1, 191 - 54);
    }

    #[test]
    fn oversized_rise_names_parameter() {
        let mut spec = nominal_spec(Subtype::FanCableStayed, 192, 48);
        spec.tower_or_arch_rise_px = 60;
        let err = render(&spec).unwrap_err().to_string();
        assert!(err.contains("tower_or_arch_rise_px"), "{err}");
        let mut spec = nominal_spec(Subtype::EqualSectionBeam, 192, 48);
        spec.deck_y = 47;
        assert!(render(&spec).unwrap_err().to_string().contains("deck_y"));
    }

    #[test]
    fn every_subtype_renders_at_reduced_size() {
        for s in Subtype::ALL {
            for i in 0..50 {
                let img = render(&generate_spec_sized(s, i, 3, 96, 24)).unwrap();
                assert_eq!((img.width(), img.height()), (96, 24));
                assert!(img.is_mirror_symmetric());
            }
        }
    }
}
