//! Severity timeline chart as a PNG, drawn pixel by pixel.
//!
//! Observed points are blue dots joined by lines, forecast points orange
//! with a dashed line. Green verticals mark medication starts, the grey
//! horizontal marks S = 100. No text is rendered; axis ranges are printed
//! by the caller.

use std::path::Path;

use chrono::{DateTime, Utc};
use ctdx_core::SeverityPoint;
use image::{Rgb, RgbImage};

pub const WIDTH: u32 = 800;
pub const HEIGHT: u32 = 400;
const MARGIN: f64 = 40.0;

pub const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
pub const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
pub const REFERENCE: Rgb<u8> = Rgb([190, 190, 190]);
pub const OBSERVED: Rgb<u8> = Rgb([31, 119, 180]);
pub const FORECAST: Rgb<u8> = Rgb([255, 127, 14]);
pub const MEDICATION: Rgb<u8> = Rgb([44, 160, 44]);

/// Data ranges mapped onto the plot area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub t0: DateTime<Utc>,
    pub t1: DateTime<Utc>,
    pub s_max: f64,
}

impl Frame {
    pub fn fit(points: &[SeverityPoint], meds: &[DateTime<Utc>]) -> Option<Self> {
        let times = points.iter().map(|p| p.timestamp).chain(meds.iter().copied());
        let t0 = times.clone().min()?;
        let t1 = times.max()?;
        let s_max = points.iter().map(|p| p.s).fold(100.0, f64::max) * 1.1;
        Some(Self { t0, t1, s_max })
    }

    pub fn x(&self, t: DateTime<Utc>) -> f64 {
        let span = (self.t1 - self.t0).num_seconds().max(1) as f64;
        let frac = (t - self.t0).num_seconds() as f64 / span;
        MARGIN + frac * (WIDTH as f64 - 2.0 * MARGIN)
    }

    pub fn y(&self, s: f64) -> f64 {
        HEIGHT as f64 - MARGIN - s / self.s_max * (HEIGHT as f64 - 2.0 * MARGIN)
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Straight line; with `dash` set, alternating runs of that many pixels
/// are skipped.
fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>, dash: Option<usize>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        if dash.is_some_and(|d| (i / d) % 2 == 1) {
            continue;
        }
        let f = i as f64 / steps as f64;
        put(img, (x0 + f * (x1 - x0)).round() as i64, (y0 + f * (y1 - y0)).round() as i64, c);
    }
}

fn dot(img: &mut RgbImage, (x, y): (f64, f64), c: Rgb<u8>) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -3..=3i64 {
        for dx in -3..=3i64 {
            if dx * dx + dy * dy <= 9 {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

pub fn render(points: &[SeverityPoint], meds: &[DateTime<Utc>]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let Some(frame) = Frame::fit(points, meds) else {
        return img;
    };
    let (left, right) = (MARGIN, WIDTH as f64 - MARGIN);
    let (top, bottom) = (MARGIN, HEIGHT as f64 - MARGIN);
    line(&mut img, (left, frame.y(100.0)), (right, frame.y(100.0)), REFERENCE, Some(6));
    for &m in meds {
        line(&mut img, (frame.x(m), top), (frame.x(m), bottom), MEDICATION, None);
    }
    line(&mut img, (left, bottom), (right, bottom), AXIS, None);
    line(&mut img, (left, top), (left, bottom), AXIS, None);

    let xy = |p: &SeverityPoint| (frame.x(p.timestamp), frame.y(p.s));
    for w in points.windows(2) {
        let (color, dash) = if w[1].is_forecast { (FORECAST, Some(4)) } else { (OBSERVED, None) };
        line(&mut img, xy(&w[0]), xy(&w[1]), color, dash);
    }
    for p in points {
        dot(&mut img, xy(p), if p.is_forecast { FORECAST } else { OBSERVED });
    }
    img
}

pub fn save(points: &[SeverityPoint], meds: &[DateTime<Utc>], path: &Path) -> image::ImageResult<()> {
    render(points, meds).save_with_format(path, image::ImageFormat::Png)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};

    fn pt(day: i64, s: f64, forecast: bool) -> SeverityPoint {
        SeverityPoint {
            timestamp: Utc.with_ymd_and_hms(2021, 3, 1, 0, 0, 0).unwrap() + Duration::days(day),
            q: (!forecast).then_some(s),
            s,
            is_forecast: forecast,
            scan_id: None,
        }
    }

    #[test]
    fn points_land_where_the_frame_says() {
        let pts = [pt(0, 100.0, false), pt(1, 80.0, false), pt(2, 60.0, true)];
        let med = pts[1].timestamp;
        let img = render(&pts, &[med]);
        let frame = Frame::fit(&pts, &[med]).unwrap();
        for p in &pts {
            let (x, y) = (frame.x(p.timestamp).round() as u32, frame.y(p.s).round() as u32);
            let want = if p.is_forecast { FORECAST } else { OBSERVED };
            assert_eq!(*img.get_pixel(x, y), want);
        }
        assert_eq!(frame.x(pts[0].timestamp), MARGIN);
        assert_eq!(frame.x(pts[2].timestamp), WIDTH as f64 - MARGIN);
        let mx = frame.x(med).round() as u32;
        assert_eq!(*img.get_pixel(mx, MARGIN as u32 + 2), MEDICATION);
    }

    #[test]
    fn empty_timeline_is_blank() {
        let img = render(&[], &[]);
        assert!(img.pixels().all(|p| *p == BACKGROUND));
    }
}
