//! Static figure files: latent scatter and likelihood histogram as SVG, image
//! grids as binary PGM. Output depends only on the inputs, so files are
//! byte-reproducible.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{Histogram, MetricsReport};
use crate::mnist::{to_byte, Dataset, SIDE};
use crate::model::{decode, encode_batch, VaeParams};
use crate::sampling::{sample_latent_noise, Purpose, Rng};

/// Digit colours 0–9 (the matplotlib "tab10" cycle).
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf",
];

pub const ROBUSTNESS_COLOR: &str = "red";
pub const ACCURACY_COLOR: &str = "blue";
pub const DECISIVENESS_COLOR: &str = "green";

/// Pixels between tiles of an image grid.
pub const SEPARATOR: usize = 2;
pub const SEPARATOR_VALUE: u8 = 255;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 540.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn of(points: &[[f64; 2]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("bounding box of no points".into()));
        }
        let mut b = BoundingBox {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for [x, y] in points {
            b.x_min = b.x_min.min(*x);
            b.x_max = b.x_max.max(*x);
            b.y_min = b.y_min.min(*y);
            b.y_max = b.y_max.max(*y);
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Linear map from a data interval onto a pixel interval. A degenerate data
/// interval is widened by 0.5 on each side.
#[derive(Debug, Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Scale { lo, hi, px_lo, px_hi }
    }

    fn padded(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.0 };
        Self::new(lo - pad, hi + pad, px_lo, px_hi)
    }

    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    fn ticks(&self, n: usize) -> Vec<f64> {
        (0..=n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64).collect()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, x: &Scale, y: &Scale, x_label: &str, y_label: &str, y_integer: bool) {
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    let _ = writeln!(s, r#"<g class="axes" stroke="black" stroke-width="1">"#);
    let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}"/>"#);
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="ticks">"#);
    for t in x.ticks(5) {
        let px = x.map(t);
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{t:.2}</text>"#,
            y0 + 5.0,
            y0 + 18.0
        );
    }
    for t in y.ticks(5) {
        let py = y.map(t);
        let label = if y_integer { format!("{}", t.round()) } else { format!("{t:.2}") };
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0:.2}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

/// Latent means `μ(x)` of every image; requires a 2-D latent space.
pub fn latent_points(params: &VaeParams, data: &Dataset) -> Result<Vec<[f64; 2]>> {
    if params.dims.z_dim != 2 {
        return Err(Error::Argument(format!(
            "latent scatter needs z_dim = 2, this model has z_dim = {}; projections are not supported",
            params.dims.z_dim
        )));
    }
    if data.is_empty() {
        return Err(Error::Argument("latent scatter of an empty dataset".into()));
    }
    let mut unused = Rng::new(0, Purpose::Eval);
    let (mu, _) = encode_batch(params, &data.images, false, 0.0, &mut unused)?;
    Ok((0..mu.rows()).map(|i| [mu.row(i)[0], mu.row(i)[1]]).collect())
}

/// One `<circle>` per point, coloured by digit label, with axes and a legend.
pub fn render_latent_svg(points: &[[f64; 2]], labels: &[u8], title: &str) -> Result<String> {
    if points.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|l| **l > 9) {
        return Err(Error::Argument(format!("label {l} has no palette colour")));
    }
    let bbox = BoundingBox::of(points)?;
    let x = Scale::padded(bbox.x_min, bbox.x_max, LEFT, WIDTH - RIGHT);
    let y = Scale::padded(bbox.y_min, bbox.y_max, HEIGHT - BOTTOM, TOP);
    let mut s = svg_open(title);
    axes(&mut s, &x, &y, "mu_1", "mu_2", false);
    let _ = writeln!(
        s,
        r#"<g class="points" data-x-min="{}" data-x-max="{}" data-y-min="{}" data-y-max="{}">"#,
        bbox.x_min, bbox.x_max, bbox.y_min, bbox.y_max
    );
    for ([px, py], l) in points.iter().zip(labels) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{}" fill-opacity="0.7" data-label="{l}"/>"#,
            x.map(*px),
            y.map(*py),
            PALETTE[*l as usize]
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (digit, colour) in PALETTE.iter().enumerate() {
        let ly = TOP + 10.0 + 20.0 * digit as f64;
        let lx = WIDTH - RIGHT + 25.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.2}" y="{ly:.2}" width="12" height="12" fill="{colour}"/><text x="{:.2}" y="{:.2}">{digit}</text>"#,
            lx + 18.0,
            ly + 10.0
        );
    }
    let _ = writeln!(s, "</g>\n</svg>");
    Ok(s)
}

pub fn fig_latent(params: &VaeParams, data: &Dataset, title: &str) -> Result<String> {
    let points = latent_points(params, data)?;
    render_latent_svg(&points, &data.labels, title)
}

/// Bars of the histogram plus dashed vertical lines at the three metrics:
/// red robustness, blue accuracy, green decisiveness. Each line carries its
/// exact value in `data-value`.
pub fn render_histogram_svg(hist: &Histogram, report: &MetricsReport, title: &str) -> Result<String> {
    if hist.bins.is_empty() || hist.total() == 0 {
        return Err(Error::Argument("histogram has no values".into()));
    }
    let metrics = [
        ("robustness", report.robustness_log10, ROBUSTNESS_COLOR),
        ("accuracy", report.accuracy_log10, ACCURACY_COLOR),
        ("decisiveness", report.decisiveness_log10, DECISIVENESS_COLOR),
    ];
    let lo = metrics.iter().map(|m| m.1).fold(hist.min(), f64::min);
    let hi = metrics.iter().map(|m| m.1).fold(hist.max(), f64::max);
    let x = Scale::padded(lo, hi, LEFT, WIDTH - RIGHT);
    let peak = hist.bins.iter().map(|b| b.count).max().unwrap_or(1) as f64;
    let y = Scale::new(0.0, peak, HEIGHT - BOTTOM, TOP);
    let mut s = svg_open(title);
    axes(&mut s, &x, &y, "log10 likelihood", "images", true);
    let _ = writeln!(s, r##"<g class="bars" fill="#9ecae1" stroke="#3182bd">"##);
    for b in &hist.bins {
        // A zero-width bin (all values equal) is drawn 4 px wide around its value.
        let (mut left, mut right) = (x.map(b.lo), x.map(b.hi));
        if right - left < 1.0 {
            left -= 2.0;
            right += 2.0;
        }
        let top = y.map(b.count as f64);
        let _ = writeln!(
            s,
            r#"<rect class="bar" x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" data-lo="{}" data-hi="{}" data-count="{}"/>"#,
            right - left,
            y.map(0.0) - top,
            b.lo,
            b.hi,
            b.count
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="metrics" stroke-width="2" stroke-dasharray="6 4">"#);
    for (name, value, colour) in metrics {
        let px = x.map(value);
        let _ = writeln!(
            s,
            r#"<line class="metric {name}" x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="{colour}" data-value="{value}"/>"#,
            y.map(0.0),
            TOP
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (i, (name, _, colour)) in metrics.iter().enumerate() {
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{colour}" stroke-width="2" stroke-dasharray="6 4"/><text x="{:.2}" y="{:.2}">{name}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0
        );
    }
    let _ = writeln!(s, "</g>\n</svg>");
    Ok(s)
}

/// What the tiles of an image grid show.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridSource {
    Originals,
    /// `decode(μ(x))`.
    Reconstructions,
    /// Decoded draws of the run's latent noise distribution.
    Samples,
}

impl FromStr for GridSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "originals" => Ok(GridSource::Originals),
            "reconstructions" => Ok(GridSource::Reconstructions),
            "samples" => Ok(GridSource::Samples),
            other => Err(Error::Argument(format!(
                "unknown grid source `{other}` (expected originals, reconstructions or samples)"
            ))),
        }
    }
}

fn to_tiles(images: &Tensor) -> Vec<Vec<u8>> {
    (0..images.rows())
        .map(|i| images.row(i).iter().map(|&v| to_byte(v)).collect())
        .collect()
}

/// `count` grey-scale 28×28 tiles. Originals and reconstructions use the first
/// `count` images of `data`; samples decode `count` draws from stream
/// `(seed, Samples, 0, 0)` of the latent noise with coupling `kappa_d`.
pub fn grid_tiles(
    source: GridSource,
    params: Option<&VaeParams>,
    data: Option<&Dataset>,
    count: usize,
    kappa_d: f64,
    seed: u64,
) -> Result<Vec<Vec<u8>>> {
    let need_model = || params.ok_or_else(|| Error::Argument("this grid source needs a checkpoint".into()));
    let first = |count: usize| -> Result<Tensor> {
        let data = data.ok_or_else(|| Error::Argument("this grid source needs a dataset".into()))?;
        if data.len() < count {
            return Err(Error::Argument(format!(
                "grid needs {count} images, dataset has {}",
                data.len()
            )));
        }
        Ok(data.images.select_rows(&(0..count).collect::<Vec<_>>()))
    };
    let mut unused = Rng::new(seed, Purpose::Eval);
    match source {
        GridSource::Originals => Ok(to_tiles(&first(count)?)),
        GridSource::Reconstructions => {
            let params = need_model()?;
            let x = first(count)?;
            let (mu, _) = encode_batch(params, &x, false, 0.0, &mut unused)?;
            Ok(to_tiles(&decode(params, &mu, false, 0.0, &mut unused)?))
        }
        GridSource::Samples => {
            let params = need_model()?;
            let z_dim = params.dims.z_dim;
            let mut rng = Rng::new(seed, Purpose::Samples);
            let mut z = Vec::with_capacity(count * z_dim);
            for _ in 0..count {
                z.extend(sample_latent_noise(z_dim, kappa_d, &mut rng)?.epsilon);
            }
            let z = Tensor::from_vec(&[count, z_dim], z)?;
            Ok(to_tiles(&decode(params, &z, false, 0.0, &mut unused)?))
        }
    }
}

/// Binary PGM (`P5`) of `rows × cols` tiles in row-major order, separated by
/// [`SEPARATOR`]-pixel white lines.
pub fn render_pgm(tiles: &[Vec<u8>], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Argument("grid needs at least one row and one column".into()));
    }
    if tiles.len() < rows * cols {
        return Err(Error::Argument(format!(
            "grid of {rows}x{cols} needs {} images, got {}",
            rows * cols,
            tiles.len()
        )));
    }
    if let Some(t) = tiles.iter().find(|t| t.len() != SIDE * SIDE) {
        return Err(Error::Argument(format!("tile has {} pixels, expected {}", t.len(), SIDE * SIDE)));
    }
    let width = cols * SIDE + (cols - 1) * SEPARATOR;
    let height = rows * SIDE + (rows - 1) * SEPARATOR;
    let mut pixels = vec![SEPARATOR_VALUE; width * height];
    for (k, tile) in tiles.iter().take(rows * cols).enumerate() {
        let (r, c) = (k / cols, k % cols);
        let (top, left) = (r * (SIDE + SEPARATOR), c * (SIDE + SEPARATOR));
        for y in 0..SIDE {
            let dst = (top + y) * width + left;
            pixels[dst..dst + SIDE].copy_from_slice(&tile[y * SIDE..(y + 1) * SIDE]);
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// `(width, height, pixels)` of a binary PGM written by [`render_pgm`].
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Header("not a binary PGM with maxval 255".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != w * h {
        return Err(Error::ShortRead {
            expected: w * h,
            found: data.len(),
        });
    }
    Ok((w, h, data.to_vec()))
}
