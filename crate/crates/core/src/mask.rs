//! Attention masks over token sequences.
//!
//! Lead-aware visibility inside an ECG block is scoped to each lead's own
//! span, so the mask of a lead-permuted sequence is the permuted mask:
//!
//! - text, `EcgStart`, `EcgEnd`: causal;
//! - `Seg(e, l, t)`: special tokens before the block, the block's
//!   `EcgStart`, its own `LeadStart(l)`/`LeadEnd(l)`, and every `Seg(e, *, t)`;
//! - `LeadStart(l)`/`LeadEnd(l)`: everything up to the block's `EcgStart`,
//!   causal tokens inside the own lead span, and all own-lead segments.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tokenizer::{Token, TokenSequence};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScheme {
    LeadAware,
    FullEcg,
    Causal,
}

impl MaskScheme {
    pub const ALL: [MaskScheme; 3] = [MaskScheme::LeadAware, MaskScheme::FullEcg, MaskScheme::Causal];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskScheme::LeadAware => "lead_aware",
            MaskScheme::FullEcg => "full_ecg",
            MaskScheme::Causal => "causal",
        }
    }
}

impl fmt::Display for MaskScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskScheme::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("scheme", format!("unknown mask scheme {s:?} (lead_aware, full_ecg, causal)")))
    }
}

/// Square boolean matrix, bit-packed per row. `get(i, j)`: query `i` may
/// attend to key `j`.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AttentionMask({})", self.n)?;
        for i in 0..self.n.min(64) {
            let row: String = (0..self.n.min(64)).map(|j| if self.get(i, j) { '1' } else { '.' }).collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

impl AttentionMask {
    pub fn empty(n: usize) -> Self {
        let words = n.div_ceil(64);
        AttentionMask {
            n,
            words,
            bits: vec![0; n * words],
        }
    }

    pub fn causal(n: usize) -> Self {
        let mut m = Self::empty(n);
        for i in 0..n {
            m.set_range(i, 0, i + 1);
        }
        m
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(n);
        for i in 0..n {
            for j in 0..n {
                if f(i, j) {
                    m.set(i, j);
                }
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < self.n && j < self.n);
        self.bits[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.words + j / 64] |= 1 << (j % 64);
    }

    /// Set `[lo, hi)` in row `i`.
    pub fn set_range(&mut self, i: usize, lo: usize, hi: usize) {
        let row = &mut self.bits[i * self.words..(i + 1) * self.words];
        let mut j = lo;
        while j < hi {
            let (w, b) = (j / 64, j % 64);
            let span = (64 - b).min(hi - j);
            let ones = if span == 64 { u64::MAX } else { ((1u64 << span) - 1) << b };
            row[w] |= ones;
            j += span;
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = bool> + '_ {
        (0..self.n).map(move |j| self.get(i, j))
    }

    pub fn count_row(&self, i: usize) -> usize {
        self.bits[i * self.words..(i + 1) * self.words]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// `out[a][b] = self[p[a]][p[b]]`, i.e. `P M P^T` for the permutation
    /// matrix with `P[a][p[a]] = 1`.
    pub fn conjugate(&self, p: &[usize]) -> Self {
        assert_eq!(p.len(), self.n);
        Self::from_fn(self.n, |a, b| self.get(p[a], p[b]))
    }

    /// Positions reachable through `hops` attention steps (information flow
    /// of a `hops`-layer residual stack).
    pub fn reachability(&self, hops: usize) -> Self {
        let mut r = self.clone();
        for _ in 1..hops {
            let mut next = Self::empty(self.n);
            for i in 0..self.n {
                let row = &mut next.bits[i * self.words..(i + 1) * self.words];
                for k in 0..self.n {
                    if r.get(i, k) {
                        let src = &self.bits[k * self.words..(k + 1) * self.words];
                        row.iter_mut().zip(src).for_each(|(a, b)| *a |= b);
                    }
                }
            }
            r = next;
        }
        r
    }

    /// Portable binary form: `n` as little-endian u64, then the `n * n`
    /// matrix row-major, 8 entries per byte, least significant bit first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let total = self.n * self.n;
        let mut out = Vec::with_capacity(8 + total.div_ceil(8));
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        let mut packed = vec![0u8; total.div_ceil(8)];
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) {
                    let k = i * self.n + j;
                    packed[k / 8] |= 1 << (k % 8);
                }
            }
        }
        out.extend_from_slice(&packed);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::invalid("mask", "missing size header"))?;
        let n = u64::from_le_bytes(header) as usize;
        let total = n
            .checked_mul(n)
            .ok_or_else(|| Error::invalid("mask", format!("size {n} overflows")))?;
        let payload = &bytes[8..];
        if payload.len() != total.div_ceil(8) {
            return Err(Error::SampleCountMismatch {
                expected: total.div_ceil(8),
                found: payload.len(),
            });
        }
        let mut m = Self::empty(n);
        for k in 0..total {
            if payload[k / 8] >> (k % 8) & 1 == 1 {
                m.set(k / n, k % n);
            }
        }
        Ok(m)
    }

    /// Plain PBM (`P1`), one pixel per entry, 1 = visible.
    pub fn to_pbm(&self) -> String {
        let mut s = format!("P1\n{} {}\n", self.n, self.n);
        for i in 0..self.n {
            let row: Vec<&str> = self.row(i).map(|b| if b { "1" } else { "0" }).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn build_mask(seq: &TokenSequence, scheme: MaskScheme) -> AttentionMask {
    let n = seq.len();
    let mut m = AttentionMask::causal(n);
    if scheme == MaskScheme::Causal {
        return m;
    }
    let layouts = seq.parse_blocks().expect("sequence validated on construction");
    if scheme == MaskScheme::FullEcg {
        for b in &layouts {
            for i in b.start..=b.end {
                m.set_range(i, b.start, b.end + 1);
            }
        }
        return m;
    }

    let tokens = seq.tokens();
    let mut specials_before: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for b in &layouts {
        specials_before.extend((cursor..b.start).filter(|&p| tokens[p].is_special()));
        for &(ls, le) in &b.lead_spans {
            // Lead markers: prefix through EcgStart, then the own span.
            for (row, hi) in [(ls, le), (le, le + 1)] {
                m.clear_row(row);
                m.set_range(row, 0, b.start + 1);
                m.set_range(row, ls, hi);
            }
            for t in 1..le - ls {
                let row = ls + t;
                m.clear_row(row);
                for &p in &specials_before {
                    m.set(row, p);
                }
                m.set(row, b.start);
                m.set(row, ls);
                m.set(row, le);
                for &(ls2, _) in &b.lead_spans {
                    m.set(row, ls2 + t);
                }
            }
        }
        // Block markers of this block precede later blocks.
        specials_before.push(b.start);
        specials_before.extend(b.lead_spans.iter().flat_map(|&(s, e)| [s, e]));
        specials_before.push(b.end);
        cursor = b.end + 1;
    }
    m
}

impl AttentionMask {
    fn clear_row(&mut self, i: usize) {
        self.bits[i * self.words..(i + 1) * self.words].fill(0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Text,
    Open,
    Close,
    LeadMark,
    Seg { t: u32 },
}

#[derive(Debug, Clone, Copy)]
struct Info {
    kind: Kind,
    /// Block ordinal and its `EcgStart` position.
    block: Option<(usize, usize)>,
    /// Ordinal of the lead span within the sequence.
    span: Option<usize>,
}

fn annotate(tokens: &[Token]) -> Vec<Info> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut block: Option<(usize, usize)> = None;
    let mut blocks_seen = 0;
    let mut span: Option<usize> = None;
    let mut spans_seen = 0;
    for (p, tok) in tokens.iter().enumerate() {
        let info = match *tok {
            Token::Text { .. } => Info { kind: Kind::Text, block: None, span: None },
            Token::EcgStart => {
                block = Some((blocks_seen, p));
                blocks_seen += 1;
                Info { kind: Kind::Open, block, span: None }
            }
            Token::EcgEnd => {
                let i = Info { kind: Kind::Close, block, span: None };
                block = None;
                i
            }
            Token::LeadStart { .. } => {
                span = Some(spans_seen);
                spans_seen += 1;
                Info { kind: Kind::LeadMark, block, span }
            }
            Token::LeadEnd { .. } => {
                let i = Info { kind: Kind::LeadMark, block, span };
                span = None;
                i
            }
            Token::Seg { t, .. } => Info { kind: Kind::Seg { t }, block, span },
        };
        out.push(info);
    }
    out
}

/// Direct per-pair evaluation of the visibility rules, O(n^2).
pub fn oracle_mask(seq: &TokenSequence, scheme: MaskScheme) -> AttentionMask {
    let info = annotate(seq.tokens());
    let is_special = |k: Kind| matches!(k, Kind::Open | Kind::Close | Kind::LeadMark);
    AttentionMask::from_fn(seq.len(), |i, j| {
        if i == j {
            return true;
        }
        let (a, b) = (info[i], info[j]);
        match scheme {
            MaskScheme::Causal => j < i,
            MaskScheme::FullEcg => j < i || (a.block.is_some() && a.block == b.block),
            MaskScheme::LeadAware => match a.kind {
                Kind::Text | Kind::Open | Kind::Close => j < i,
                Kind::Seg { t } => {
                    let start = a.block.unwrap().1;
                    (is_special(b.kind) && j < start)
                        || j == start
                        || (b.kind == Kind::LeadMark && b.span == a.span)
                        || (b.kind == Kind::Seg { t } && b.block == a.block)
                }
                Kind::LeadMark => {
                    let start = a.block.unwrap().1;
                    j <= start
                        || (j < i && b.span == a.span)
                        || (matches!(b.kind, Kind::Seg { .. }) && b.span == a.span)
                }
            },
        }
    })
}

/// Reorder the lead spans of block `block` (0-based ordinal): new lead `k`
/// is old lead `perm[k]`. Returns the new sequence and the induced position
/// map (`new position -> old position`).
pub fn permute_leads(seq: &TokenSequence, block: usize, perm: &[usize]) -> Result<(TokenSequence, Vec<usize>)> {
    let layouts = seq.parse_blocks()?;
    let b = layouts
        .get(block)
        .ok_or_else(|| Error::invalid("block", format!("sequence has {} ECG blocks", layouts.len())))?;
    let l = b.lead_spans.len();
    let mut check = perm.to_vec();
    check.sort_unstable();
    if check != (0..l).collect::<Vec<_>>() {
        return Err(Error::invalid("permutation", format!("{perm:?} is not a permutation of 0..{l}")));
    }
    let mut map: Vec<usize> = (0..=b.start).collect();
    for &k in perm {
        let (s, e) = b.lead_spans[k];
        map.extend(s..=e);
    }
    map.extend(b.end..seq.len());
    let tokens = map.iter().map(|&p| seq.tokens()[p]).collect();
    Ok((TokenSequence::new(tokens, seq.role_spans().to_vec())?, map))
}

/// Whether `build_mask(permute(seq)) == P build_mask(seq) P^T`.
pub fn permute_leads_mask_check(seq: &TokenSequence, block: usize, perm: &[usize], scheme: MaskScheme) -> Result<bool> {
    let (permuted, map) = permute_leads(seq, block, perm)?;
    Ok(build_mask(&permuted, scheme) == build_mask(seq, scheme).conjugate(&map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{assemble, EcgBlock, Part, Role};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(rng: &mut ChaCha8Rng) -> TokenSequence {
        let n_blocks = rng.gen_range(1..=2);
        let blocks: Vec<EcgBlock> = (0..n_blocks)
            .map(|_| EcgBlock::new(rng.gen_range(1..=4), rng.gen_range(1..=5)))
            .collect();
        let n_text = rng.gen_range(0..=3);
        let texts: Vec<Vec<u32>> = (0..n_text)
            .map(|_| (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..20)).collect())
            .collect();
        let mut order: Vec<Part> = (0..n_blocks).map(Part::ecg).collect();
        for i in 0..n_text {
            let at = rng.gen_range(0..=order.len());
            order.insert(at, Part::text(i).role(if rng.gen_bool(0.5) { Role::User } else { Role::Assistant }));
        }
        assemble(&texts, &blocks, &order).unwrap()
    }

    fn example() -> TokenSequence {
        let blocks = [EcgBlock::new(2, 2)];
        assemble(&[vec![7]], &blocks, &[Part::text(0), Part::ecg(0)]).unwrap()
    }

    #[test]
    fn text_only_is_lower_triangular() {
        let seq = assemble(&[vec![1, 2, 3, 4]], &[], &[Part::text(0)]).unwrap();
        for s in MaskScheme::ALL {
            assert_eq!(build_mask(&seq, s), AttentionMask::causal(4));
        }
    }

    #[test]
    fn lead_aware_example_matrix() {
        // [txt, S, L1, s11, s12, E1, L2, s21, s22, E2, /S]
        let expected = [
            "1..........",
            "11.........",
            "11111......",
            ".111.1.1...",
            ".11.11..1..",
            "111111.....",
            "11....111..",
            ".1.1..11.1.",
            ".1..1.1.11.",
            "11....1111.",
            "11111111111",
        ];
        let want = AttentionMask::from_fn(11, |i, j| expected[i].as_bytes()[j] == b'1');
        let m = build_mask(&example(), MaskScheme::LeadAware);
        assert_eq!(m, want, "{m:?}");
        assert!(m.get(3, 7), "Seg(l=1,t=1) sees Seg(l=2,t=1)");
        assert_eq!(oracle_mask(&example(), MaskScheme::LeadAware), m);
    }

    #[test]
    fn builder_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let seq = random_seq(&mut rng);
            for s in MaskScheme::ALL {
                assert_eq!(build_mask(&seq, s), oracle_mask(&seq, s), "{s} {:?}", seq.tokens());
            }
        }
    }

    #[test]
    fn mask_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let seq = random_seq(&mut rng);
            let m = build_mask(&seq, MaskScheme::LeadAware);
            let toks = seq.tokens();
            for i in 0..seq.len() {
                assert!(m.get(i, i));
                for j in 0..seq.len() {
                    if toks[i].is_text() && j > i {
                        assert!(!m.get(i, j));
                    }
                    // no rule grants visibility into future text
                    if toks[j].is_text() && j > i {
                        assert!(!m.get(i, j));
                    }
                    if let (Token::Seg { ecg: e1, t: t1, .. }, Token::Seg { ecg: e2, t: t2, .. }) = (toks[i], toks[j]) {
                        let same = e1 == e2 && t1 == t2;
                        assert_eq!(m.get(i, j), same);
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_conjugation() {
        let seq = assemble(&[], &[EcgBlock::new(2, 3)], &[Part::ecg(0)]).unwrap();
        assert!(permute_leads_mask_check(&seq, 0, &[0, 1], MaskScheme::LeadAware).unwrap());
        assert!(permute_leads_mask_check(&seq, 0, &[1, 0], MaskScheme::LeadAware).unwrap());
        assert!(permute_leads_mask_check(&seq, 0, &[1, 0], MaskScheme::FullEcg).unwrap());
        assert!(!permute_leads_mask_check(&seq, 0, &[1, 0], MaskScheme::Causal).unwrap());
        assert!(permute_leads_mask_check(&seq, 0, &[0, 0], MaskScheme::Causal).is_err());
    }

    #[test]
    fn bytes_and_pbm_round_trip() {
        let m = build_mask(&example(), MaskScheme::LeadAware);
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 8 + (121usize).div_ceil(8));
        assert_eq!(AttentionMask::from_bytes(&bytes).unwrap(), m);
        assert!(AttentionMask::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let pbm = m.to_pbm();
        assert!(pbm.starts_with("P1\n11 11\n1 0 0"));
    }

    #[test]
    fn reachability_grows() {
        let m = build_mask(&example(), MaskScheme::LeadAware);
        let r2 = m.reachability(2);
        assert_eq!(m.reachability(1), m);
        // s11 -> s21 -> L2 (two hops), not one
        assert!(!m.get(3, 6) && r2.get(3, 6));
    }

    #[test]
    fn set_range_spans_words() {
        let mut m = AttentionMask::empty(200);
        m.set_range(5, 60, 130);
        assert_eq!(m.count_row(5), 70);
        assert!(m.get(5, 60) && m.get(5, 129) && !m.get(5, 130) && !m.get(5, 59));
    }
}
