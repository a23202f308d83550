//! Region Dice and the 15-combination missing-modality report.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kdtrain::{predict, ToyModel};
use crate::synth::region_masks;
use crate::volume::{ensure_dims, BrainMask, LabelVolume, Modality, MultiModalVolume, Sample};

/// `2|P∩G| / (|P|+|G|)`; 1.0 when both masks are empty.
pub fn dice(pred: &BrainMask, gt: &BrainMask) -> Result<f64> {
    ensure_dims(pred.dims(), gt.dims())?;
    let mut overlap = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        overlap += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * overlap as f64 / total as f64)
}

/// Dice for WT, TC and ET.
pub fn region_dice(pred: &LabelVolume, gt: &LabelVolume) -> Result<[f64; 3]> {
    let p = region_masks(pred);
    let g = region_masks(gt);
    Ok([dice(&p.wt, &g.wt)?, dice(&p.tc, &g.tc)?, dice(&p.et, &g.et)?])
}

/// A nonempty subset of the four modalities. Bit `i` is the modality with
/// index `i`, so FLAIR is the least significant bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Combination(u8);

impl Combination {
    pub const FULL: Combination = Combination(0b1111);

    pub fn from_bits(bits: u8) -> Result<Combination> {
        if bits == 0 || bits > 0b1111 {
            return Err(Error::NoModalities);
        }
        Ok(Combination(bits))
    }

    pub fn from_mask(mask: [bool; 4]) -> Result<Combination> {
        Combination::from_bits((0..4).filter(|&i| mask[i]).map(|i| 1u8 << i).sum())
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn mask(self) -> [bool; 4] {
        [0, 1, 2, 3].map(|i| self.0 & (1 << i) != 0)
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Modality::ALL.iter().filter(|m| self.contains(**m)).map(|m| m.short()).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for Combination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Combination> {
        let mut bits = 0u8;
        for tok in s.split(['+', ',']).map(str::trim).filter(|t| !t.is_empty()) {
            let m = match tok.to_ascii_lowercase().as_str() {
                "f" | "flair" => Modality::Flair,
                "t1ce" | "t1c" => Modality::T1ce,
                "t1" => Modality::T1,
                "t2" => Modality::T2,
                _ => return Err(Error::InvalidConfig(format!("unknown modality {tok:?}"))),
            };
            bits |= 1 << m.index();
        }
        Combination::from_bits(bits)
    }
}

impl Serialize for Combination {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Combination {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All 15 combinations, bit pattern ascending.
pub fn combinations() -> Vec<Combination> {
    (1..=15).map(Combination).collect()
}

pub trait Segmenter: Sync {
    fn segment(&self, x: &MultiModalVolume) -> LabelVolume;
}

impl Segmenter for ToyModel {
    fn segment(&self, x: &MultiModalVolume) -> LabelVolume {
        predict(self, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionDice {
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
}

/// Mean per-sample region Dice with only the modalities in `comb` available.
pub fn evaluate<M: Segmenter + ?Sized>(model: &M, samples: &[Sample], comb: Combination) -> Result<RegionDice> {
    evaluate_with(samples, comb, |_, x| Ok(model.segment(x)))
}

/// Like [`evaluate`] with an arbitrary predictor that also sees the sample.
pub fn evaluate_with<F>(samples: &[Sample], comb: Combination, predict: F) -> Result<RegionDice>
where
    F: Fn(&Sample, &MultiModalVolume) -> Result<LabelVolume> + Sync,
{
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let per: Vec<[f64; 3]> = samples
        .par_iter()
        .map(|s| {
            let x = s.image.restrict(comb.mask())?;
            let pred = predict(s, &x)?;
            region_dice(&pred, &s.labels)
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mut sum = [0.0; 3];
    for d in &per {
        for r in 0..3 {
            sum[r] += d[r];
        }
    }
    Ok(RegionDice {
        wt: sum[0] / n,
        tc: sum[1] / n,
        et: sum[2] / n,
    })
}

pub fn evaluate_all<M: Segmenter + ?Sized>(model: &M, samples: &[Sample]) -> Result<DiceReport> {
    let rows = combinations()
        .into_iter()
        .map(|c| {
            let d = evaluate(model, samples, c)?;
            Ok(ReportRow {
                combination: c,
                wt: 100.0 * d.wt,
                tc: 100.0 * d.tc,
                et: 100.0 * d.et,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DiceReport::new(rows)
}

/// Dice in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub combination: Combination,
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    rows: Vec<ReportRow>,
}

const REPORT_HEADER: &str = "combination,WT,TC,ET";

impl DiceReport {
    /// Sorts rows into canonical order; every combination must appear once.
    pub fn new(mut rows: Vec<ReportRow>) -> Result<DiceReport> {
        rows.sort_by_key(|r| r.combination);
        for c in combinations() {
            if rows.iter().filter(|r| r.combination == c).count() != 1 {
                return Err(Error::MissingCombination(c.to_string()));
            }
        }
        for r in &rows {
            for v in [r.wt, r.tc, r.et] {
                if !(0.0..=100.0).contains(&v) {
                    return Err(Error::InvalidConfig(format!("dice {v} out of [0,100] for {}", r.combination)));
                }
            }
        }
        Ok(DiceReport { rows })
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    pub fn row(&self, c: Combination) -> &ReportRow {
        &self.rows[c.bits() as usize - 1]
    }

    /// Column means over the 15 rows.
    pub fn average(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for r in &self.rows {
            s[0] += r.wt;
            s[1] += r.tc;
            s[2] += r.et;
        }
        s.map(|v| v / self.rows.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.2},{:.2},{:.2}\n", r.combination, r.wt, r.tc, r.et));
        }
        let [a, b, c] = self.average();
        out.push_str(&format!("average,{a:.2},{b:.2},{c:.2}\n"));
        out
    }

    /// Parses a report written by [`DiceReport::to_csv`]; the average row is
    /// recomputed rather than trusted.
    pub fn from_csv(text: &str) -> Result<DiceReport> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(REPORT_HEADER) {
            return Err(Error::InvalidConfig("missing report header".into()));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::InvalidConfig(format!("bad report line {line:?}")));
            }
            if cols[0] == "average" {
                continue;
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::InvalidConfig(format!("bad number {s:?}")));
            rows.push(ReportRow {
                combination: cols[0].parse()?,
                wt: num(cols[1])?,
                tc: num(cols[2])?,
                et: num(cols[3])?,
            });
        }
        DiceReport::new(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Volume3D};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(d: Dims, on: &[usize]) -> BrainMask {
        let mut v = vec![false; d.len()];
        on.iter().for_each(|&i| v[i] = true);
        BrainMask::new(d, v).unwrap()
    }

    #[test]
    fn dice_cases() {
        let d = Dims::new(2, 2, 4);
        let a = mask(d, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let b = mask(d, &[4, 5, 6, 7, 8, 9, 10, 11]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(d, &[8, 9])).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&BrainMask::empty(d), &BrainMask::empty(d)).unwrap(), 1.0);
        assert_eq!(dice(&a, &BrainMask::empty(d)).unwrap(), 0.0);
        assert!(dice(&a, &BrainMask::empty(Dims::cube(2))).is_err());
    }

    fn brute(p: &[bool], g: &[bool]) -> f64 {
        let inter = (0..p.len()).filter(|&i| p[i] && g[i]).count();
        let np = p.iter().filter(|&&v| v).count();
        let ng = g.iter().filter(|&&v| v).count();
        if np + ng == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (np + ng) as f64
        }
    }

    #[test]
    fn dice_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let d = Dims::new(rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16));
            let fp: f64 = rng.random();
            let fg: f64 = rng.random();
            let p: Vec<bool> = (0..d.len()).map(|_| rng.random_bool(fp)).collect();
            let g: Vec<bool> = (0..d.len()).map(|_| rng.random_bool(fg)).collect();
            let got = dice(&BrainMask::new(d, p.clone()).unwrap(), &BrainMask::new(d, g.clone()).unwrap()).unwrap();
            assert_eq!(got, brute(&p, &g));
        }
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_reflexive(p in proptest::collection::vec(any::<bool>(), 27), g in proptest::collection::vec(any::<bool>(), 27)) {
            let d = Dims::cube(3);
            let (p, g) = (BrainMask::new(d, p).unwrap(), BrainMask::new(d, g).unwrap());
            prop_assert_eq!(dice(&p, &g).unwrap(), dice(&g, &p).unwrap());
            prop_assert_eq!(dice(&p, &p).unwrap(), 1.0);
        }
    }

    #[test]
    fn enumeration_is_canonical() {
        let c = combinations();
        assert_eq!(c.len(), 15);
        assert_eq!(c[0].to_string(), "F");
        assert_eq!(c[1].to_string(), "T1ce");
        assert_eq!(c[2].to_string(), "F+T1ce");
        assert_eq!(c[14].to_string(), "F+T1ce+T1+T2");
        let mut seen = std::collections::HashSet::new();
        for x in &c {
            assert!(seen.insert(x.mask()));
            assert_eq!(x.to_string().parse::<Combination>().unwrap(), *x);
        }
        assert!("".parse::<Combination>().is_err());
        assert_eq!("flair,t2".parse::<Combination>().unwrap().bits(), 0b1001);
    }

    fn samples() -> Vec<Sample> {
        let d = Dims::new(2, 3, 3);
        (0..3)
            .map(|k| {
                let labels: Vec<u8> = (0..d.len()).map(|i| [0, 0, 1, 2, 4][(i + k) % 5]).collect();
                let v = Volume3D::new(d, labels.iter().map(|&l| l as f32 + 1.0).collect()).unwrap();
                Sample::new(
                    format!("s{k}"),
                    MultiModalVolume::full(v.clone(), v.clone(), v.clone(), v).unwrap(),
                    LabelVolume::new(d, labels).unwrap(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn oracle_and_background_predictors() {
        let s = samples();
        for c in combinations() {
            let d = evaluate_with(&s, c, |smp, _| Ok(smp.labels.clone())).unwrap();
            assert_eq!((d.wt, d.tc, d.et), (1.0, 1.0, 1.0));
            let z = evaluate_with(&s, c, |smp, _| Ok(LabelVolume::zeros(smp.dims()))).unwrap();
            assert_eq!((z.wt, z.tc, z.et), (0.0, 0.0, 0.0));
        }
        assert!(matches!(evaluate_with(&[], Combination::FULL, |s, _| Ok(s.labels.clone())), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn predictor_sees_only_the_combination() {
        let s = samples();
        for c in combinations() {
            evaluate_with(&s, c, |smp, x| {
                assert_eq!(x.availability(), c.mask());
                Ok(smp.labels.clone())
            })
            .unwrap();
        }
    }

    #[test]
    fn flipping_predictions_never_beats_oracle() {
        let s = samples();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let flips: Vec<Vec<bool>> = s.iter().map(|x| (0..x.dims().len()).map(|_| rng.random_bool(0.2)).collect()).collect();
            let d = evaluate_with(&s, Combination::FULL, |smp, _| {
                let k: usize = smp.id[1..].parse().unwrap();
                let data = smp.labels.data().iter().zip(&flips[k]).map(|(&l, &f)| if f { if l == 0 { 2 } else { 0 } } else { l }).collect();
                LabelVolume::new(smp.dims(), data)
            })
            .unwrap();
            assert!(d.wt <= 1.0);
        }
    }

    fn report_with(f: impl Fn(usize) -> f64) -> DiceReport {
        DiceReport::new(
            combinations()
                .into_iter()
                .enumerate()
                .map(|(i, c)| ReportRow {
                    combination: c,
                    wt: f(i),
                    tc: 100.0,
                    et: 50.0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn report_average_and_roundtrip() {
        let r = report_with(|_| 100.0);
        assert!(r.to_csv().ends_with("average,100.00,100.00,50.00\n"));
        let r = report_with(|i| i as f64);
        assert_eq!(r.average()[0], 7.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("combination,WT,TC,ET\nF,0.00,100.00,50.00\n"));
        assert_eq!(DiceReport::from_csv(&csv).unwrap().to_csv(), csv);
    }

    #[test]
    fn missing_row_is_rejected() {
        let mut rows = report_with(|_| 1.0).rows().to_vec();
        rows.remove(3);
        assert!(matches!(DiceReport::new(rows), Err(Error::MissingCombination(c)) if c == "T1"));
    }
}
