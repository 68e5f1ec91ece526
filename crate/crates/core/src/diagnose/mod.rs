//! False-positive taxonomy for object detections: poor localization (Loc),
//! confusion with a similar category (Sim), with another category (Oth),
//! or firing on background (BG).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_WEAK_IOU: f64 = 0.1;
pub const DEFAULT_CORRECT_IOU: f64 = 0.5;

/// Axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(invalid(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BoundingBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub category: usize,
    pub score: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub category: usize,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assignment {
    /// Matched to the ground truth at this index.
    TruePositive(usize),
    /// Overlaps a ground truth that an earlier detection already claimed.
    Duplicate(usize),
    FalsePositive,
}

impl Assignment {
    pub fn is_tp(self) -> bool {
        matches!(self, Assignment::TruePositive(_))
    }
}

/// Detection indices by descending score; equal scores keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching in descending score order. A detection becomes a true
/// positive on the best-overlapping unmatched same-category ground truth in
/// its image with IoU at least `correct_iou`; failing that, it is a
/// duplicate if such a ground truth exists but is taken. Output is aligned
/// with `dets`.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    correct_iou: f64,
) -> Vec<Assignment> {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![Assignment::FalsePositive; dets.len()];
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best_free: Option<(usize, f64)> = None;
        let mut best_taken: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if g.image_id != d.image_id || g.category != d.category {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o < correct_iou {
                continue;
            }
            let slot = if taken[j] {
                &mut best_taken
            } else {
                &mut best_free
            };
            if slot.is_none_or(|(_, b)| o > b) {
                *slot = Some((j, o));
            }
        }
        out[i] = match (best_free, best_taken) {
            (Some((j, _)), _) => {
                taken[j] = true;
                Assignment::TruePositive(j)
            }
            (None, Some((j, _))) => Assignment::Duplicate(j),
            (None, None) => Assignment::FalsePositive,
        };
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FpCategory {
    Loc,
    Sim,
    Oth,
    Bg,
}

impl FpCategory {
    pub const ALL: [FpCategory; 4] = [
        FpCategory::Loc,
        FpCategory::Sim,
        FpCategory::Oth,
        FpCategory::Bg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FpCategory::Loc => "Loc",
            FpCategory::Sim => "Sim",
            FpCategory::Oth => "Oth",
            FpCategory::Bg => "BG",
        }
    }
}

/// Symmetric "similar category" relation given by groups; every category
/// is similar to itself.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimilarityMap {
    groups: Vec<Vec<usize>>,
}

/// Pascal VOC category names in their conventional index order.
pub const VOC_CATEGORIES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

impl SimilarityMap {
    pub fn new(groups: Vec<Vec<usize>>) -> Self {
        SimilarityMap { groups }
    }

    /// Vehicles, animals and furniture over the VOC category indices.
    pub fn voc_default() -> Self {
        SimilarityMap::new(vec![
            vec![0, 1, 3, 5, 6, 13, 18],
            vec![2, 7, 9, 11, 12, 16],
            vec![8, 10, 17],
        ])
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn similar(&self, a: usize, b: usize) -> bool {
        a == b || self.groups.iter().any(|g| g.contains(&a) && g.contains(&b))
    }

    /// One group per line: category ids separated by commas or whitespace.
    /// `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut groups = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("");
            let ids = content
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<usize>().map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("not a category id: {t:?}"),
                    })
                })
                .collect::<Result<Vec<usize>>>()?;
            if !ids.is_empty() {
                groups.push(ids);
            }
        }
        Ok(SimilarityMap { groups })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        self.groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
                    + "\n"
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub weak_iou: f64,
    pub correct_iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            weak_iou: DEFAULT_WEAK_IOU,
            correct_iou: DEFAULT_CORRECT_IOU,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.weak_iou && self.weak_iou < self.correct_iou && self.correct_iou < 1.0) {
            return Err(invalid(format!(
                "thresholds need 0 < weak ({}) < correct ({}) < 1",
                self.weak_iou, self.correct_iou
            )));
        }
        Ok(())
    }
}

/// Type of a false positive, checked in the order Loc, Sim, Oth, BG.
/// Duplicates are localization errors.
pub fn categorize_fp(
    det: &Detection,
    duplicate: bool,
    gts: &[GroundTruth],
    similarity: &SimilarityMap,
    thresholds: Thresholds,
) -> FpCategory {
    let mut same = 0.0f64;
    let mut sim = 0.0f64;
    let mut other = 0.0f64;
    for g in gts.iter().filter(|g| g.image_id == det.image_id) {
        let o = iou(&det.bbox, &g.bbox);
        if g.category == det.category {
            same = same.max(o);
        } else if similarity.similar(g.category, det.category) {
            sim = sim.max(o);
        } else {
            other = other.max(o);
        }
    }
    let w = thresholds.weak_iou;
    if duplicate || same >= w {
        FpCategory::Loc
    } else if sim >= w {
        FpCategory::Sim
    } else if other >= w {
        FpCategory::Oth
    } else {
        FpCategory::Bg
    }
}

/// Fractions of each false-positive type among one category's top-N
/// detections, N being the number of ground-truth objects of the category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpDistribution {
    pub category: usize,
    pub n_gt: usize,
    pub n_fp: usize,
    pub loc: f64,
    pub sim: f64,
    pub oth: f64,
    pub bg: f64,
}

impl FpDistribution {
    /// No false positives in the top N.
    pub fn is_empty(&self) -> bool {
        self.n_fp == 0
    }

    pub fn fractions(&self) -> [f64; 4] {
        [self.loc, self.sim, self.oth, self.bg]
    }
}

pub fn top_fp_distribution(
    dets: &[Detection],
    gts: &[GroundTruth],
    similarity: &SimilarityMap,
    thresholds: Thresholds,
) -> Result<BTreeMap<usize, FpDistribution>> {
    thresholds.validate()?;
    let mut by_cat: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        if !d.score.is_finite() {
            return Err(invalid(format!("detection {i} has a non-finite score")));
        }
        by_cat.entry(d.category).or_default().push(i);
    }
    let mut n_gt: HashMap<usize, usize> = HashMap::new();
    for g in gts {
        *n_gt.entry(g.category).or_default() += 1;
        by_cat.entry(g.category).or_default();
    }
    let mut out = BTreeMap::new();
    for (&cat, idx) in &by_cat {
        let cat_dets: Vec<Detection> = idx.iter().map(|&i| dets[i].clone()).collect();
        let n = n_gt.get(&cat).copied().unwrap_or(0);
        let assignment = match_detections(&cat_dets, gts, thresholds.correct_iou);
        let mut counts = [0usize; 4];
        for i in score_order(&cat_dets).into_iter().take(n) {
            let kind = match assignment[i] {
                Assignment::TruePositive(_) => continue,
                Assignment::Duplicate(_) => FpCategory::Loc,
                Assignment::FalsePositive => {
                    categorize_fp(&cat_dets[i], false, gts, similarity, thresholds)
                }
            };
            counts[kind as usize] += 1;
        }
        let n_fp: usize = counts.iter().sum();
        let frac = |k: usize| {
            if n_fp == 0 {
                0.0
            } else {
                counts[k] as f64 / n_fp as f64
            }
        };
        out.insert(
            cat,
            FpDistribution {
                category: cat,
                n_gt: n,
                n_fp,
                loc: frac(0),
                sim: frac(1),
                oth: frac(2),
                bg: frac(3),
            },
        );
    }
    Ok(out)
}

fn parse_box(fields: &[f64]) -> Result<BoundingBox> {
    BoundingBox::new(fields[0], fields[1], fields[2], fields[3])
}

fn csv_error(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

fn read_rows(path: &Path, n_numbers: usize) -> Result<Vec<(usize, String, usize, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != 2 + n_numbers {
            return Err(csv_error(
                path,
                line,
                format!("expected {} fields, got {}", 2 + n_numbers, rec.len()),
            ));
        }
        let category = rec[1]
            .parse::<usize>()
            .map_err(|_| csv_error(path, line, format!("bad category {:?}", &rec[1])))?;
        let nums = (2..rec.len())
            .map(|k| {
                rec[k]
                    .parse::<f64>()
                    .map_err(|_| csv_error(path, line, format!("not a number: {:?}", &rec[k])))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, rec[0].to_string(), category, nums));
    }
    Ok(rows)
}

/// `image_id,category,score,x_min,y_min,x_max,y_max` with a header row.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    read_rows(path, 5)?
        .into_iter()
        .map(|(line, image_id, category, n)| {
            if !n[0].is_finite() {
                return Err(csv_error(path, line, "score must be finite".into()));
            }
            Ok(Detection {
                image_id,
                category,
                score: n[0],
                bbox: parse_box(&n[1..]).map_err(|e| csv_error(path, line, e.to_string()))?,
            })
        })
        .collect()
}

/// `image_id,category,x_min,y_min,x_max,y_max` with a header row.
pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    read_rows(path, 4)?
        .into_iter()
        .map(|(line, image_id, category, n)| {
            Ok(GroundTruth {
                image_id,
                category,
                bbox: parse_box(&n).map_err(|e| csv_error(path, line, e.to_string()))?,
            })
        })
        .collect()
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "image_id", "category", "score", "x_min", "y_min", "x_max", "y_max",
    ])?;
    for d in dets {
        let b = d.bbox;
        w.serialize((
            &d.image_id,
            d.category,
            d.score,
            b.x_min,
            b.y_min,
            b.x_max,
            b.y_max,
        ))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ground_truth(path: &Path, gts: &[GroundTruth]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "category", "x_min", "y_min", "x_max", "y_max"])?;
    for g in gts {
        let b = g.bbox;
        w.serialize((&g.image_id, g.category, b.x_min, b.y_min, b.x_max, b.y_max))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `category,n_gt,n_fp,loc,sim,oth,bg`; empty distributions have all
/// fractions zero and `n_fp = 0`.
pub fn write_distribution_csv(path: &Path, dist: &BTreeMap<usize, FpDistribution>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["category", "n_gt", "n_fp", "loc", "sim", "oth", "bg"])?;
    for d in dist.values() {
        w.serialize((d.category, d.n_gt, d.n_fp, d.loc, d.sim, d.oth, d.bg))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    fn det(cat: usize, score: f64, b: BoundingBox) -> Detection {
        Detection {
            image_id: "im".into(),
            category: cat,
            score,
            bbox: b,
        }
    }

    fn gt(cat: usize, b: BoundingBox) -> GroundTruth {
        GroundTruth {
            image_id: "im".into(),
            category: cat,
            bbox: b,
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_eq!(iou(&a, &bx(5.0, 0.0, 15.0, 10.0)), 50.0 / 150.0);
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 5.0).is_err());
    }

    #[test]
    fn duplicate_goes_to_lower_score() {
        let g = [gt(0, bx(0.0, 0.0, 10.0, 10.0))];
        let d = [
            det(0, 0.4, bx(0.0, 0.0, 10.0, 10.0)),
            det(0, 0.9, bx(0.0, 0.0, 10.0, 10.0)),
        ];
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(
            m,
            vec![Assignment::Duplicate(0), Assignment::TruePositive(0)]
        );
    }

    #[test]
    fn rule_table() {
        let sim = SimilarityMap::new(vec![vec![0, 1]]);
        let t = Thresholds::default();
        let base = bx(0.0, 0.0, 10.0, 10.0);
        // IoU 1/3 with the same class
        let g = [gt(0, bx(5.0, 0.0, 15.0, 10.0))];
        assert_eq!(
            categorize_fp(&det(0, 1.0, base), false, &g, &sim, t),
            FpCategory::Loc
        );
        // only a similar-class box at IoU 0.3..
        let g = [gt(1, bx(4.0, 0.0, 14.0, 10.0))];
        assert_eq!(
            categorize_fp(&det(0, 1.0, base), false, &g, &sim, t),
            FpCategory::Sim
        );
        let g = [gt(2, bx(4.0, 0.0, 14.0, 10.0))];
        assert_eq!(
            categorize_fp(&det(0, 1.0, base), false, &g, &sim, t),
            FpCategory::Oth
        );
        let g = [gt(0, bx(9.5, 0.0, 19.5, 10.0))];
        assert_eq!(
            categorize_fp(&det(0, 1.0, base), false, &g, &sim, t),
            FpCategory::Bg
        );
        assert_eq!(
            categorize_fp(&det(0, 1.0, base), true, &g, &sim, t),
            FpCategory::Loc
        );
    }

    #[test]
    fn no_fp_is_flagged_empty() {
        let g = [gt(0, bx(0.0, 0.0, 10.0, 10.0))];
        let d = [
            det(0, 0.9, bx(0.0, 0.0, 10.0, 10.0)),
            det(0, 0.1, bx(50.0, 50.0, 60.0, 60.0)),
        ];
        let dist =
            top_fp_distribution(&d, &g, &SimilarityMap::default(), Thresholds::default()).unwrap();
        assert!(dist[&0].is_empty());
    }

    #[test]
    fn similarity_file() {
        let p = Path::new("groups.txt");
        let m = SimilarityMap::parse("# vehicles\n0, 1 3\n\n2 4\n", p).unwrap();
        assert!(m.similar(1, 3) && m.similar(3, 1) && m.similar(7, 7));
        assert!(!m.similar(0, 2));
        assert_eq!(SimilarityMap::parse(&m.to_text(), p).unwrap(), m);
        assert!(matches!(
            SimilarityMap::parse("0 1\nx\n", p),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let dp = tmp.path().join("d.csv");
        let gp = tmp.path().join("g.csv");
        let d = vec![det(3, 0.75, bx(1.0, 2.0, 3.5, 4.0))];
        let g = vec![gt(3, bx(1.0, 2.0, 3.0, 4.0))];
        write_detections(&dp, &d).unwrap();
        write_ground_truth(&gp, &g).unwrap();
        assert_eq!(read_detections(&dp).unwrap(), d);
        assert_eq!(read_ground_truth(&gp).unwrap(), g);
        fs::write(
            &dp,
            "image_id,category,score,x_min,y_min,x_max,y_max\nim,0,0.5,5,5,1,9\n",
        )
        .unwrap();
        assert!(matches!(
            read_detections(&dp),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
