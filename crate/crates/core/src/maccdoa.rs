//! Multi-ACCDOA targets: per (frame, track, class) activity-coupled
//! Cartesian direction vector plus distance, and the event-list codec.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SeldError};
use crate::{LABEL_FRAMES, N_CLASSES, N_TRACKS};

/// Norm above which a track/class vector counts as active.
pub const ACTIVITY_THRESHOLD: f64 = 0.5;
/// Same-class detections closer than this in one frame are unified.
pub const MERGE_RADIUS_DEG: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub frame: u32,
    pub class_id: usize,
    /// Degrees in `[-180, 180)`, counterclockwise, 0 = front, +90 = left.
    pub azimuth_deg: f64,
    pub distance_m: f64,
    pub track_hint: Option<usize>,
}

impl Event {
    pub fn new(frame: u32, class_id: usize, azimuth_deg: f64, distance_m: f64) -> Self {
        Event {
            frame,
            class_id,
            azimuth_deg: wrap_azimuth(azimuth_deg),
            distance_m,
            track_hint: None,
        }
    }

    pub fn with_track(mut self, track: usize) -> Self {
        self.track_hint = Some(track);
        self
    }
}

/// Map any angle into `[-180, 180)`.
pub fn wrap_azimuth(deg: f64) -> f64 {
    let w = (deg + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

fn event_order(a: &Event, b: &Event) -> Ordering {
    a.frame
        .cmp(&b.frame)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.azimuth_deg.total_cmp(&b.azimuth_deg))
}

/// Events sorted by (frame, class, azimuth).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventList {
    events: Vec<Event>,
}

impl EventList {
    pub fn new(mut events: Vec<Event>) -> Self {
        events.sort_by(event_order);
        EventList { events }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.events.iter()
    }

    /// Checks value ranges; `max_frame` bounds frame indices (exclusive).
    pub fn validate(&self, n_classes: usize, max_frame: Option<u32>) -> Result<()> {
        for e in &self.events {
            if e.class_id >= n_classes {
                return Err(SeldError::invalid(format!("class {} out of range", e.class_id)));
            }
            if let Some(m) = max_frame {
                if e.frame >= m {
                    return Err(SeldError::invalid(format!("frame {} out of range", e.frame)));
                }
            }
            if !(e.distance_m > 0.0 && e.distance_m.is_finite()) {
                return Err(SeldError::invalid(format!("distance {} must be positive", e.distance_m)));
            }
            if !e.azimuth_deg.is_finite() {
                return Err(SeldError::NonFinite("azimuth"));
            }
        }
        Ok(())
    }

    /// Shift every frame index by `offset` (for concatenating clips).
    pub fn offset_frames(&self, offset: u32) -> EventList {
        EventList::new(
            self.events
                .iter()
                .map(|e| Event {
                    frame: e.frame + offset,
                    ..e.clone()
                })
                .collect(),
        )
    }

    pub fn extend(&mut self, other: EventList) {
        self.events.extend(other.events);
        self.events.sort_by(event_order);
    }
}

impl FromIterator<Event> for EventList {
    fn from_iter<I: IntoIterator<Item = Event>>(iter: I) -> Self {
        EventList::new(iter.into_iter().collect())
    }
}

/// `[frames][tracks][classes][3]` with last axis `(x, y, distance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaccdoaTensor {
    pub frames: usize,
    pub tracks: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl MaccdoaTensor {
    pub fn zeros(frames: usize, tracks: usize, classes: usize) -> Self {
        MaccdoaTensor {
            frames,
            tracks,
            classes,
            data: vec![0.0; frames * tracks * classes * 3],
        }
    }

    /// Default task geometry: 50 frames, 3 tracks, 13 classes.
    pub fn task_zeros() -> Self {
        Self::zeros(LABEL_FRAMES, N_TRACKS, N_CLASSES)
    }

    pub fn from_vec(frames: usize, tracks: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * tracks * classes * 3 {
            return Err(SeldError::shape(format!(
                "maccdoa: {} values for [{frames}][{tracks}][{classes}][3]",
                data.len()
            )));
        }
        Ok(MaccdoaTensor {
            frames,
            tracks,
            classes,
            data,
        })
    }

    #[inline]
    pub fn offset(&self, frame: usize, track: usize, class: usize) -> usize {
        ((frame * self.tracks + track) * self.classes + class) * 3
    }

    pub fn get(&self, frame: usize, track: usize, class: usize) -> [f64; 3] {
        let o = self.offset(frame, track, class);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, frame: usize, track: usize, class: usize, v: [f64; 3]) {
        let o = self.offset(frame, track, class);
        self.data[o..o + 3].copy_from_slice(&v);
    }

    pub fn same_shape(&self, other: &MaccdoaTensor) -> bool {
        (self.frames, self.tracks, self.classes) == (other.frames, other.tracks, other.classes)
    }

    /// Reorder tracks: output track `t` takes input track `perm[t]`.
    pub fn permute_tracks(&self, perm: &[usize]) -> MaccdoaTensor {
        assert_eq!(perm.len(), self.tracks);
        let mut out = MaccdoaTensor::zeros(self.frames, self.tracks, self.classes);
        for f in 0..self.frames {
            for (t, &src) in perm.iter().enumerate() {
                for c in 0..self.classes {
                    out.set(f, t, c, self.get(f, src, c));
                }
            }
        }
        out
    }
}

/// Fill a Multi-ACCDOA target from events. Each active (frame, class) puts
/// `(cos az, sin az, distance)` on its hinted track, else the first free one.
pub fn encode(events: &EventList, frames: usize, tracks: usize, classes: usize) -> Result<MaccdoaTensor> {
    events.validate(classes, Some(frames as u32))?;
    let mut out = MaccdoaTensor::zeros(frames, tracks, classes);
    let mut used = vec![false; frames * tracks * classes];
    let slot = |f: usize, t: usize, c: usize| (f * tracks + t) * classes + c;

    // hinted events claim their tracks first so unhinted ones fill around them
    let (hinted, free): (Vec<&Event>, Vec<&Event>) =
        events.iter().partition(|e| e.track_hint.is_some_and(|t| t < tracks));
    for e in hinted.into_iter().chain(free) {
        let (f, c) = (e.frame as usize, e.class_id);
        let preferred = e.track_hint.filter(|&t| t < tracks && !used[slot(f, t, c)]);
        let track = match preferred.or_else(|| (0..tracks).find(|&t| !used[slot(f, t, c)])) {
            Some(t) => t,
            None => {
                let count = events
                    .iter()
                    .filter(|o| o.frame == e.frame && o.class_id == c)
                    .count();
                return Err(SeldError::Capacity {
                    frame: e.frame,
                    class_id: c,
                    count,
                    max: tracks,
                });
            }
        };
        used[slot(f, track, c)] = true;
        let az = e.azimuth_deg.to_radians();
        out.set(f, track, c, [az.cos(), az.sin(), e.distance_m]);
    }
    Ok(out)
}

/// Default-geometry encode.
pub fn encode_task(events: &EventList) -> Result<MaccdoaTensor> {
    encode(events, LABEL_FRAMES, N_TRACKS, N_CLASSES)
}

/// Angular distance on the circle, in `[0, 180]`.
pub fn angular_distance(a_deg: f64, b_deg: f64) -> f64 {
    let d = (a_deg - b_deg).rem_euclid(360.0);
    d.min(360.0 - d)
}

fn circular_mean_deg(angles: &[f64]) -> f64 {
    let (s, c) = angles.iter().fold((0.0, 0.0), |(s, c), a| {
        let r = a.to_radians();
        (s + r.sin(), c + r.cos())
    });
    wrap_azimuth(s.atan2(c).to_degrees())
}

/// Read events back out of a tensor.
///
/// A slot is active iff `sqrt(x^2 + y^2) > threshold`. Same-class
/// detections within [`MERGE_RADIUS_DEG`] in one frame are unified with a
/// circular-mean azimuth and a mean distance. The track hint of a decoded
/// event is the lowest track that contributed to it.
pub fn decode(tensor: &MaccdoaTensor, threshold: f64) -> EventList {
    let mut events = Vec::new();
    for f in 0..tensor.frames {
        for c in 0..tensor.classes {
            // (track, azimuth, distance)
            let mut dets: Vec<(usize, f64, f64)> = (0..tensor.tracks)
                .filter_map(|t| {
                    let [x, y, d] = tensor.get(f, t, c);
                    ((x * x + y * y).sqrt() > threshold)
                        .then(|| (t, wrap_azimuth(y.atan2(x).to_degrees()), d))
                })
                .collect();
            if dets.is_empty() {
                continue;
            }
            // order-independent clustering: sort by azimuth so the result
            // does not depend on which track a detection sat on
            dets.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)));
            let mut clusters: Vec<Vec<(usize, f64, f64)>> = Vec::new();
            for det in dets {
                let near = clusters.iter_mut().find(|cl| {
                    let azs: Vec<f64> = cl.iter().map(|d| d.1).collect();
                    angular_distance(circular_mean_deg(&azs), det.1) <= MERGE_RADIUS_DEG
                });
                match near {
                    Some(cl) => cl.push(det),
                    None => clusters.push(vec![det]),
                }
            }
            for cl in clusters {
                let azs: Vec<f64> = cl.iter().map(|d| d.1).collect();
                let az = if cl.len() == 1 { cl[0].1 } else { circular_mean_deg(&azs) };
                let dist = cl.iter().map(|d| d.2).sum::<f64>() / cl.len() as f64;
                let track = cl.iter().map(|d| d.0).min().unwrap();
                events.push(Event {
                    frame: f as u32,
                    class_id: c,
                    azimuth_deg: az,
                    distance_m: dist,
                    track_hint: Some(track),
                });
            }
        }
    }
    EventList::new(events)
}

/// Read a `frame,class,track,azimuth,distance[,onscreen]` CSV of reference
/// labels. A header row is skipped if its first field is not an integer.
/// Distances must be positive.
pub fn read_events_csv<R: Read>(reader: R) -> Result<EventList> {
    read_csv(reader, false)
}

/// Like [`read_events_csv`] but admits the zero distances a rectified
/// prediction can carry.
pub fn read_predictions_csv<R: Read>(reader: R) -> Result<EventList> {
    read_csv(reader, true)
}

fn read_csv<R: Read>(reader: R, allow_zero_distance: bool) -> Result<EventList> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut events = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<i64>().is_err()) {
            continue;
        }
        if rec.len() < 5 || rec.len() > 6 {
            return Err(SeldError::invalid(format!(
                "csv line {}: expected 5 or 6 columns, got {}",
                i + 1,
                rec.len()
            )));
        }
        let bad = |what: &str| SeldError::invalid(format!("csv line {}: bad {what}", i + 1));
        let frame: u32 = rec[0].parse().map_err(|_| bad("frame"))?;
        let class_id: usize = rec[1].parse().map_err(|_| bad("class"))?;
        let track: usize = rec[2].parse().map_err(|_| bad("track"))?;
        let azimuth: f64 = rec[3].parse().map_err(|_| bad("azimuth"))?;
        let distance: f64 = rec[4].parse().map_err(|_| bad("distance"))?;
        let admissible = distance > 0.0 || (allow_zero_distance && distance == 0.0);
        if !(admissible && distance.is_finite()) {
            return Err(SeldError::invalid(format!(
                "csv line {}: distance must be positive, got {distance}",
                i + 1
            )));
        }
        if !azimuth.is_finite() {
            return Err(bad("azimuth"));
        }
        events.push(Event::new(frame, class_id, azimuth, distance).with_track(track));
    }
    Ok(EventList::new(events))
}

pub fn read_events_file(path: &Path) -> Result<EventList> {
    read_events_csv(std::fs::File::open(path)?)
}

pub fn read_predictions_file(path: &Path) -> Result<EventList> {
    read_predictions_csv(std::fs::File::open(path)?)
}

/// Write events as headerless `frame,class,track,azimuth,distance` rows.
pub fn write_events_csv<W: Write>(events: &EventList, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for e in events.iter() {
        w.write_record(&[
            e.frame.to_string(),
            e.class_id.to_string(),
            e.track_hint.unwrap_or(0).to_string(),
            format!("{}", e.azimuth_deg),
            format!("{}", e.distance_m),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events_file(events: &EventList, path: &Path) -> Result<()> {
    write_events_csv(events, std::fs::File::create(path)?)
}
