//! Temporal sampling and spatial augmentation.

use rand::Rng;

use crate::error::{MaeError, Result};
use crate::video::VideoClip;

// Aspect-ratio jitter for random resized crops.
const ASPECT_LO: f64 = 3.0 / 4.0;
const ASPECT_HI: f64 = 4.0 / 3.0;

/// Takes `num_frames` frames at the given stride from a uniformly random
/// start. Indices past the end clamp to the last frame (repeat-pad), so
/// short videos never fail.
pub fn sample_clip<R: Rng>(
    video: &VideoClip,
    num_frames: usize,
    stride: usize,
    rng: &mut R,
) -> Result<VideoClip> {
    if num_frames == 0 || stride == 0 {
        return Err(MaeError::Config(format!(
            "sample_clip needs num_frames >= 1 and stride >= 1, got {num_frames}/{stride}"
        )));
    }
    let len = video.num_frames();
    let span = (num_frames - 1) * stride + 1;
    let max_start = len.saturating_sub(span);
    let start = rng.gen_range(0..=max_start);

    let (_, h, w, c) = video.dims();
    let frame_len = h * w * c;
    let mut frames = Vec::with_capacity(num_frames * frame_len);
    for i in 0..num_frames {
        let idx = (start + i * stride).min(len - 1);
        frames.extend_from_slice(video.frame(idx));
    }
    VideoClip::new(
        frames,
        (num_frames, h, w, c),
        video.source_id.clone(),
        stride as u32,
    )
}

/// Random resized crop plus optional horizontal flip.
///
/// One crop rectangle and one flip decision are drawn per clip and applied
/// identically to every frame. The scale range is an area fraction; aspect
/// ratio jitters in [3/4, 4/3]. Bilinear resize to `out_h x out_w`.
pub fn augment<R: Rng>(
    clip: &VideoClip,
    out_h: usize,
    out_w: usize,
    scale_range: (f64, f64),
    hflip_prob: f64,
    rng: &mut R,
) -> Result<VideoClip> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(MaeError::Config(format!(
            "scale range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(MaeError::Config("output size must be >= 1".to_string()));
    }
    let (t, h, w, c) = clip.dims();

    let (crop_x, crop_y, crop_w, crop_h) = draw_crop(rng, h, w, lo, hi);
    let flip = rng.gen::<f64>() < hflip_prob;

    let mut frames = Vec::with_capacity(t * out_h * out_w * c);
    let sx = crop_w as f64 / out_w as f64;
    let sy = crop_h as f64 / out_h as f64;
    for ft in 0..t {
        for oy in 0..out_h {
            let src_y = crop_y as f64 + (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..out_w {
                let ox_eff = if flip { out_w - 1 - ox } else { ox };
                let src_x = crop_x as f64 + (ox_eff as f64 + 0.5) * sx - 0.5;
                for ch in 0..c {
                    let v = bilinear(clip, ft, src_y, src_x, ch);
                    frames.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    VideoClip::new(
        frames,
        (t, out_h, out_w, c),
        clip.source_id.clone(),
        clip.frame_stride,
    )
}

/// Samples a crop rectangle `(x, y, w, h)`; ten attempts at the requested
/// area/aspect, then the largest aspect-legal center crop.
fn draw_crop<R: Rng>(
    rng: &mut R,
    h: usize,
    w: usize,
    lo: f64,
    hi: f64,
) -> (usize, usize, usize, usize) {
    let full_area = (h * w) as f64;
    for _ in 0..10 {
        let target_area = rng.gen_range(lo..=hi) * full_area;
        let aspect = rng.gen_range(ASPECT_LO.ln()..=ASPECT_HI.ln()).exp();
        // degenerate sizes clamp to one pixel rather than failing
        let cw = ((target_area * aspect).sqrt().round() as usize).max(1);
        let ch = ((target_area / aspect).sqrt().round() as usize).max(1);
        if cw <= w && ch <= h {
            let x = rng.gen_range(0..=w - cw);
            let y = rng.gen_range(0..=h - ch);
            return (x, y, cw, ch);
        }
    }
    // fallback: center crop clipped to the aspect bounds
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < ASPECT_LO {
        (w, ((w as f64 / ASPECT_LO).round() as usize).clamp(1, h))
    } else if in_ratio > ASPECT_HI {
        (((h as f64 * ASPECT_HI).round() as usize).clamp(1, w), h)
    } else {
        (w, h)
    };
    ((w - cw) / 2, (h - ch) / 2, cw, ch)
}

/// Bilinear sample at continuous coordinates with half-pixel alignment;
/// coordinates clamp to the frame border.
fn bilinear(clip: &VideoClip, t: usize, src_y: f64, src_x: f64, ch: usize) -> f32 {
    let (_, h, w, _) = clip.dims();
    let y0f = src_y.floor();
    let x0f = src_x.floor();
    let fy = (src_y - y0f) as f32;
    let fx = (src_x - x0f) as f32;
    let y0 = (y0f.max(0.0) as usize).min(h - 1);
    let x0 = (x0f.max(0.0) as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    // out-of-range coordinates collapse both taps onto the border pixel
    let (fy, fx) = (
        if src_y < 0.0 { 0.0 } else { fy },
        if src_x < 0.0 { 0.0 } else { fx },
    );

    let p00 = clip.pixel(t, y0, x0, ch);
    let p01 = clip.pixel(t, y0, x1, ch);
    let p10 = clip.pixel(t, y1, x0, ch);
    let p11 = clip.pixel(t, y1, x1, ch);
    (1.0 - fy) * ((1.0 - fx) * p00 + fx * p01) + fy * ((1.0 - fx) * p10 + fx * p11)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, stream};

    fn ramp_clip(t: usize, h: usize, w: usize, c: usize) -> VideoClip {
        let n = t * h * w * c;
        let frames: Vec<f32> = (0..n).map(|i| i as f32 / n as f32).collect();
        VideoClip::new(frames, (t, h, w, c), "ramp", 1).unwrap()
    }

    #[test]
    fn sixteen_by_four_sampling_covers_strided_frames() {
        // span (16-1)*4+1 == 61 == len forces start 0: frames {0,4,...,60}
        let video = ramp_clip(61, 2, 2, 1);
        let mut rng = rng_for(&[0, stream::DATA]);
        let sampled = sample_clip(&video, 16, 4, &mut rng).unwrap();
        assert_eq!(sampled.num_frames(), 16);
        for i in 0..16 {
            assert_eq!(sampled.frame(i), video.frame(i * 4), "frame {i}");
        }
        assert_eq!(sampled.frame_stride, 4);

        // longer videos start anywhere in [0, len - span]
        let video = ramp_clip(64, 2, 2, 1);
        for seed in 0..10 {
            let mut rng = rng_for(&[seed, stream::DATA]);
            let sampled = sample_clip(&video, 16, 4, &mut rng).unwrap();
            let start = video
                .pixels()
                .iter()
                .position(|&v| v == sampled.pixel(0, 0, 0, 0))
                .unwrap()
                / 4;
            assert!(start <= 3, "start {start} outside [0, 3]");
            for i in 0..16 {
                assert_eq!(sampled.frame(i), video.frame(start + i * 4));
            }
        }
    }

    #[test]
    fn one_frame_video_repeats() {
        let video = ramp_clip(1, 2, 2, 1);
        let mut rng = rng_for(&[1, stream::DATA]);
        let sampled = sample_clip(&video, 16, 4, &mut rng).unwrap();
        for i in 0..16 {
            assert_eq!(sampled.frame(i), video.frame(0));
        }
    }

    #[test]
    fn short_video_clamps_to_last_frame() {
        let video = ramp_clip(20, 2, 2, 1);
        let mut rng = rng_for(&[2, stream::DATA]);
        let sampled = sample_clip(&video, 16, 4, &mut rng).unwrap();
        let expected: Vec<usize> = (0..16).map(|i| (i * 4).min(19)).collect();
        for (i, &src) in expected.iter().enumerate() {
            assert_eq!(sampled.frame(i), video.frame(src), "frame {i} -> {src}");
        }
    }

    #[test]
    fn sample_clip_rejects_zero_params() {
        let video = ramp_clip(4, 2, 2, 1);
        let mut rng = rng_for(&[3, stream::DATA]);
        assert!(sample_clip(&video, 0, 1, &mut rng).is_err());
        assert!(sample_clip(&video, 4, 0, &mut rng).is_err());
    }

    #[test]
    fn identity_augment_is_exact() {
        let clip = ramp_clip(3, 8, 8, 2);
        let mut rng = rng_for(&[4, stream::AUGMENT]);
        let out = augment(&clip, 8, 8, (1.0, 1.0), 0.0, &mut rng).unwrap();
        assert_eq!(out.pixels(), clip.pixels());
    }

    #[test]
    fn hflip_mirrors_columns() {
        let clip = ramp_clip(2, 4, 6, 1);
        let mut rng = rng_for(&[5, stream::AUGMENT]);
        let out = augment(&clip, 4, 6, (1.0, 1.0), 1.0, &mut rng).unwrap();
        for t in 0..2 {
            for y in 0..4 {
                for x in 0..6 {
                    assert_eq!(out.pixel(t, y, x, 0), clip.pixel(t, y, 5 - x, 0));
                }
            }
        }
    }

    #[test]
    fn augment_keeps_t_c_and_range() {
        let clip = ramp_clip(5, 16, 12, 3);
        for seed in 0..20 {
            let mut rng = rng_for(&[seed, stream::AUGMENT]);
            let out = augment(&clip, 8, 8, (0.5, 1.0), 0.5, &mut rng).unwrap();
            let (t, h, w, c) = out.dims();
            assert_eq!((t, h, w, c), (5, 8, 8, 3));
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn crop_rectangle_consistent_across_frames() {
        // frames differ only by a constant offset; after an identical crop
        // the per-frame difference stays constant everywhere
        let (t, h, w) = (4, 16, 16);
        let mut frames = Vec::new();
        for ft in 0..t {
            for y in 0..h {
                for x in 0..w {
                    frames.push((y * w + x) as f32 / (2 * h * w) as f32 + ft as f32 * 0.1);
                }
            }
        }
        let clip = VideoClip::new(frames, (t, h, w, 1), "const-offset", 1).unwrap();
        for seed in 0..30 {
            let mut rng = rng_for(&[seed, stream::AUGMENT]);
            let out = augment(&clip, 8, 8, (0.5, 1.0), 0.5, &mut rng).unwrap();
            for ft in 1..t {
                for y in 0..8 {
                    for x in 0..8 {
                        let diff = out.pixel(ft, y, x, 0) - out.pixel(0, y, x, 0);
                        assert!(
                            (diff - ft as f32 * 0.1).abs() < 1e-5,
                            "seed {seed} frame {ft} ({y},{x}): {diff}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn augment_rejects_bad_scale_range() {
        let clip = ramp_clip(2, 8, 8, 1);
        let mut rng = rng_for(&[6, stream::AUGMENT]);
        assert!(augment(&clip, 8, 8, (0.0, 1.0), 0.0, &mut rng).is_err());
        assert!(augment(&clip, 8, 8, (0.8, 0.5), 0.0, &mut rng).is_err());
        assert!(augment(&clip, 8, 8, (0.5, 1.2), 0.0, &mut rng).is_err());
    }
}
