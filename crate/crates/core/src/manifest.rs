//! Frame manifests: the engine's view of a video.
//!
//! A manifest lists ordered (timestamp, URI) frame references plus the frame
//! rate and duration. It is the only video abstraction the engine touches;
//! decoding and frame extraction happen outside (see the CLI's `extract`
//! helper).

use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("invalid manifest: {0}")]
    Invalid(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// One frame: where it sits on the timeline and where its pixels live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    /// Seconds from video start.
    pub timestamp: f64,
    /// URI or filesystem path of the frame image.
    pub uri: String,
}

/// Ordered frame references with timing metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawManifest", into = "RawManifest")]
pub struct FrameManifest {
    video_id: String,
    fps: f64,
    duration: f64,
    frames: Vec<FrameRef>,
}

/// Wire form of a manifest, validated on the way in.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawManifest {
    video_id: String,
    fps: f64,
    duration: f64,
    frames: Vec<FrameRef>,
}

impl TryFrom<RawManifest> for FrameManifest {
    type Error = ManifestError;

    fn try_from(raw: RawManifest) -> Result<Self, Self::Error> {
        FrameManifest::new(raw.video_id, raw.fps, raw.duration, raw.frames)
    }
}

impl From<FrameManifest> for RawManifest {
    fn from(m: FrameManifest) -> RawManifest {
        RawManifest {
            video_id: m.video_id,
            fps: m.fps,
            duration: m.duration,
            frames: m.frames,
        }
    }
}

impl FrameManifest {
    pub fn new(
        video_id: String,
        fps: f64,
        duration: f64,
        frames: Vec<FrameRef>,
    ) -> Result<Self, ManifestError> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(ManifestError::Invalid(format!("fps must be positive, got {fps}")));
        }
        if frames.is_empty() {
            return Err(ManifestError::Invalid("manifest has no frames".into()));
        }
        for pair in frames.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(ManifestError::Invalid(format!(
                    "frame timestamps must be strictly increasing ({} then {})",
                    pair[0].timestamp, pair[1].timestamp
                )));
            }
        }
        let first = frames.first().expect("nonempty").timestamp;
        if !first.is_finite() || first < 0.0 {
            return Err(ManifestError::Invalid(format!(
                "first frame timestamp must be nonnegative, got {first}"
            )));
        }
        let last = frames.last().expect("nonempty").timestamp;
        if !(duration.is_finite() && duration >= last) {
            return Err(ManifestError::Invalid(format!(
                "duration {duration} is shorter than the last frame timestamp {last}"
            )));
        }
        Ok(FrameManifest {
            video_id,
            fps,
            duration,
            frames,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn frames(&self) -> &[FrameRef] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Index of the frame whose timestamp is nearest to `t`; earlier frame
    /// wins exact ties.
    pub fn nearest_frame(&self, t: f64) -> usize {
        let idx = self
            .frames
            .partition_point(|f| f.timestamp < t)
            .min(self.frames.len() - 1);
        if idx == 0 {
            return 0;
        }
        let before = &self.frames[idx - 1];
        let here = &self.frames[idx];
        if (t - before.timestamp) <= (here.timestamp - t) {
            idx - 1
        } else {
            idx
        }
    }

    /// Map a timestamp to a frame index via the frame rate, rounding to the
    /// nearest valid index and clamping at the edges.
    pub fn index_for_timestamp(&self, t: f64) -> usize {
        let raw = (t * self.fps).round();
        if raw <= 0.0 {
            0
        } else {
            (raw as usize).min(self.frames.len() - 1)
        }
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ManifestError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Synthesize a manifest with frames at a fixed rate, URIs under the
    /// given scheme prefix.
    pub fn synthetic(
        video_id: &str,
        fps: f64,
        duration: f64,
        uri_prefix: &str,
    ) -> Result<Self, ManifestError> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(ManifestError::Invalid(format!(
                "duration must be positive, got {duration}"
            )));
        }
        let count = ((duration * fps).floor() as usize).max(1);
        let frames = (0..count)
            .map(|i| FrameRef {
                timestamp: i as f64 / fps,
                uri: format!("{uri_prefix}/{i}"),
            })
            .collect();
        FrameManifest::new(video_id.to_string(), fps, duration, frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_1fps(n: usize) -> FrameManifest {
        FrameManifest::synthetic("vid", 1.0, n as f64, "mem://vid").unwrap()
    }

    #[test]
    fn rejects_unsorted_timestamps() {
        let frames = vec![
            FrameRef { timestamp: 1.0, uri: "a".into() },
            FrameRef { timestamp: 0.5, uri: "b".into() },
        ];
        assert!(FrameManifest::new("v".into(), 1.0, 2.0, frames).is_err());
    }

    #[test]
    fn rejects_duration_before_last_frame() {
        let frames = vec![
            FrameRef { timestamp: 0.0, uri: "a".into() },
            FrameRef { timestamp: 5.0, uri: "b".into() },
        ];
        assert!(FrameManifest::new("v".into(), 1.0, 4.0, frames).is_err());
    }

    #[test]
    fn nearest_frame_prefers_earlier_on_tie() {
        let m = manifest_1fps(10);
        assert_eq!(m.nearest_frame(0.5), 0);
        assert_eq!(m.nearest_frame(0.6), 1);
        assert_eq!(m.nearest_frame(100.0), 9);
        assert_eq!(m.nearest_frame(0.0), 0);
    }

    #[test]
    fn index_via_fps_clamps() {
        let m = manifest_1fps(10);
        assert_eq!(m.index_for_timestamp(3.4), 3);
        assert_eq!(m.index_for_timestamp(3.6), 4);
        assert_eq!(m.index_for_timestamp(-1.0), 0);
        assert_eq!(m.index_for_timestamp(99.0), 9);
    }

    #[test]
    fn synthetic_covers_duration() {
        let m = FrameManifest::synthetic("v", 2.0, 10.0, "mem://v").unwrap();
        assert_eq!(m.len(), 20);
        assert_eq!(m.frames()[19].timestamp, 9.5);
        assert_eq!(m.duration(), 10.0);
    }

    #[test]
    fn roundtrips_through_json() {
        let m = manifest_1fps(4);
        let text = serde_json::to_string(&m).unwrap();
        let back: FrameManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);
    }
}
