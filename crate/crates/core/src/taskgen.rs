//! Synthetic multi-step integer arithmetic with stepwise traces.
//!
//! A problem like `7+3-5=` is evaluated left to right. The response lists the
//! running totals separated by `;`, then the answer marker, the answer and
//! the end token: `10;5&ANS&5&EOS&`.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const ANS: u32 = 3;
const FIRST_CHAR: u32 = 4;
const SPECIALS: [&str; 4] = ["&PAD&", "&BOS&", "&EOS&", "&ANS&"];
const CHARS: &str = "0123456789+-*=; ";

/// Number of ids in use; any model vocabulary at least this large works.
pub const VOCAB_SIZE: usize = SPECIALS.len() + CHARS.len();

pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    let mut ids = Vec::with_capacity(text.len());
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c == '&' {
            let (i, s) = SPECIALS
                .iter()
                .enumerate()
                .find(|(_, s)| rest.starts_with(*s))
                .ok_or_else(|| Error::domain(format!("unknown special token at '{}'", truncate(rest))))?;
            ids.push(i as u32);
            rest = &rest[s.len()..];
            continue;
        }
        let pos = CHARS.find(c).ok_or_else(|| Error::domain(format!("unsupported character {c:?}")))?;
        ids.push(FIRST_CHAR + pos as u32);
        rest = &rest[c.len_utf8()..];
    }
    Ok(ids)
}

fn truncate(s: &str) -> &str {
    &s[..s.char_indices().nth(8).map_or(s.len(), |(i, _)| i)]
}

pub fn detokenize(ids: &[u32]) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        match id {
            i if (i as usize) < SPECIALS.len() => out.push_str(SPECIALS[i as usize]),
            i if (i as usize) < VOCAB_SIZE => out.push(CHARS.as_bytes()[(i - FIRST_CHAR) as usize] as char),
            i => return Err(Error::domain(format!("token id {i} outside vocabulary"))),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operator {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
}

impl Operator {
    fn symbol(self) -> char {
        match self {
            Operator::Add => '+',
            Operator::Sub => '-',
            Operator::Mul => '*',
        }
    }

    fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Operator::Add => a + b,
            Operator::Sub => a - b,
            Operator::Mul => a * b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArithTaskConfig {
    pub n_operands: usize,
    pub operand_range: [i64; 2],
    pub operators: Vec<Operator>,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_calib: usize,
    pub seed: u64,
    #[serde(default = "default_max_len")]
    pub max_seq_len: usize,
}

fn default_max_len() -> usize {
    128
}

impl Default for ArithTaskConfig {
    fn default() -> Self {
        Self {
            n_operands: 4,
            operand_range: [0, 9],
            operators: vec![Operator::Add, Operator::Sub],
            n_train: 20_000,
            n_eval: 200,
            n_calib: 256,
            seed: 7,
            max_seq_len: 128,
        }
    }
}

impl ArithTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.operand_range;
        if self.n_operands < 2 {
            return Err(Error::config("n_operands must be at least 2"));
        }
        if hi < lo {
            return Err(Error::config("operand_range needs hi >= lo"));
        }
        if self.operators.is_empty() {
            return Err(Error::config("at least one operator is required"));
        }
        // worst-case magnitude of any running total
        let m = lo.abs().max(hi.abs()).max(1) as f64;
        let bound = if self.operators.contains(&Operator::Mul) { m.powi(self.n_operands as i32) } else { m * self.n_operands as f64 };
        if bound > 1e15 {
            return Err(Error::config("intermediate values exceed the supported magnitude"));
        }
        let width = bound.log10().floor() as usize + 2; // digits plus sign
        let worst = 1 + self.n_operands * width + (self.n_operands - 1) + 1 + (self.n_operands - 1) * (width + 1) + 1 + width + 1;
        if worst > self.max_seq_len {
            return Err(Error::config(format!(
                "worst-case sequence length {worst} exceeds max_seq_len {}",
                self.max_seq_len
            )));
        }
        let distinct = ((hi - lo + 1) as f64).powi(self.n_operands as i32)
            * (self.operators.len() as f64).powi(self.n_operands as i32 - 1);
        if ((self.n_train + self.n_eval + self.n_calib) as f64) > distinct {
            return Err(Error::config(format!("only {distinct} distinct problems exist for the requested split sizes")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: String,
    pub trace: String,
    pub answer: i64,
}

impl Example {
    /// `BOS` followed by the problem text.
    pub fn prompt_ids(&self) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(tokenize(&self.prompt).expect("generated prompts are in-vocab"));
        ids
    }

    /// Trace, answer marker, answer and end token.
    pub fn response_ids(&self) -> Vec<u32> {
        let mut ids = tokenize(&self.trace).expect("generated traces are in-vocab");
        ids.push(ANS);
        ids.extend(tokenize(&self.answer.to_string()).expect("digits are in-vocab"));
        ids.push(EOS);
        ids
    }

    pub fn full_ids(&self) -> Vec<u32> {
        let mut ids = self.prompt_ids();
        ids.extend(self.response_ids());
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub calib: Vec<Example>,
}

fn random_example(cfg: &ArithTaskConfig, rng: &mut impl Rng) -> Example {
    let [lo, hi] = cfg.operand_range;
    let operands: Vec<i64> = (0..cfg.n_operands).map(|_| rng.gen_range(lo..=hi)).collect();
    let ops: Vec<Operator> = (1..cfg.n_operands).map(|_| *cfg.operators.choose(rng).unwrap()).collect();
    let mut prompt = operands[0].to_string();
    let mut totals = Vec::new();
    let mut acc = operands[0];
    for (op, &b) in ops.iter().zip(&operands[1..]) {
        prompt.push(op.symbol());
        prompt.push_str(&b.to_string());
        acc = op.apply(acc, b);
        totals.push(acc.to_string());
    }
    prompt.push('=');
    Example { prompt, trace: totals.join(";"), answer: acc }
}

/// Deterministic in `cfg.seed`; splits never share a problem string.
pub fn generate(cfg: &ArithTaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = BTreeSet::new();
    let mut take = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        let mut misses = 0usize;
        while out.len() < n {
            let ex = random_example(cfg, rng);
            if seen.insert(ex.prompt.clone()) {
                if ex.full_ids().len() > cfg.max_seq_len {
                    return Err(Error::config("generated example exceeds max_seq_len"));
                }
                out.push(ex);
                misses = 0;
            } else {
                misses += 1;
                if misses > 100_000 {
                    return Err(Error::config("problem space exhausted before the splits were filled"));
                }
            }
        }
        Ok(out)
    };
    let train = take(cfg.n_train, &mut rng)?;
    let eval = take(cfg.n_eval, &mut rng)?;
    let calib = take(cfg.n_calib, &mut rng)?;
    Ok(Dataset { train, eval, calib })
}

/// Reads a tokenized example back, checking every step of the trace.
pub fn parse_example(ids: &[u32]) -> Option<Example> {
    let (&first, rest) = ids.split_first()?;
    if first != BOS || *rest.last()? != EOS {
        return None;
    }
    let text = detokenize(&rest[..rest.len() - 1]).ok()?;
    let (problem, after) = text.split_once('=')?;
    let (trace, answer) = after.split_once(SPECIALS[ANS as usize])?;
    let answer: i64 = answer.parse().ok()?;
    let (operands, ops) = split_problem(problem)?;
    let mut acc = operands[0];
    let mut steps = trace.split(';');
    for (op, b) in ops.iter().zip(&operands[1..]) {
        acc = op.apply(acc, *b);
        if steps.next()?.parse::<i64>().ok()? != acc {
            return None;
        }
    }
    if steps.next().is_some() || acc != answer {
        return None;
    }
    Some(Example { prompt: format!("{problem}="), trace: trace.to_string(), answer })
}

fn split_problem(s: &str) -> Option<(Vec<i64>, Vec<Operator>)> {
    let mut operands = Vec::new();
    let mut ops = Vec::new();
    let mut cur = String::new();
    for c in s.chars() {
        let op = match c {
            '+' => Some(Operator::Add),
            '-' => Some(Operator::Sub),
            '*' => Some(Operator::Mul),
            _ => None,
        };
        match op {
            // a leading minus belongs to the operand
            Some(op) if !cur.is_empty() => {
                operands.push(cur.parse().ok()?);
                ops.push(op);
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    operands.push(cur.parse().ok()?);
    (operands.len() >= 2).then_some((operands, ops))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibKind {
    InDomain,
    OutOfDomain,
}

impl std::str::FromStr for CalibKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-domain" => Ok(CalibKind::InDomain),
            "out-of-domain" => Ok(CalibKind::OutOfDomain),
            _ => Err(Error::config(format!("unknown calibration kind '{s}'"))),
        }
    }
}

/// Calibration sequences holding exactly `n_tokens` tokens in total.
///
/// In-domain draws whole held-out examples (problems absent from `exclude`)
/// and picks the tail so lengths sum exactly to the budget. Out-of-domain
/// emits uniform random non-special tokens in sequences of similar length.
pub fn make_calibration(
    kind: CalibKind,
    n_tokens: usize,
    seed: u64,
    task: &ArithTaskConfig,
    exclude: &Dataset,
) -> Result<Vec<Vec<u32>>> {
    if n_tokens == 0 {
        return Err(Error::domain("calibration budget must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        CalibKind::OutOfDomain => {
            let len = 24;
            let mut out = Vec::new();
            let mut left = n_tokens;
            while left > 0 {
                let n = left.min(len);
                out.push((0..n).map(|_| rng.gen_range(FIRST_CHAR..VOCAB_SIZE as u32)).collect());
                left -= n;
            }
            Ok(out)
        }
        CalibKind::InDomain => {
            let taken: BTreeSet<&str> =
                exclude.train.iter().chain(&exclude.eval).map(|e| e.prompt.as_str()).collect();
            let mut pool: Vec<Vec<u32>> = exclude.calib.iter().map(Example::full_ids).collect();
            let mut guard = 0;
            while pool.iter().map(Vec::len).sum::<usize>() < n_tokens + 1024 && guard < 1_000_000 {
                let ex = random_example(task, &mut rng);
                if !taken.contains(ex.prompt.as_str()) {
                    pool.push(ex.full_ids());
                }
                guard += 1;
            }
            fill_exact(pool, n_tokens)
        }
    }
}

fn fill_exact(pool: Vec<Vec<u32>>, budget: usize) -> Result<Vec<Vec<u32>>> {
    let max_len = pool.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut left = budget;
    let mut rest = Vec::new();
    for seq in pool {
        if left > 3 * max_len {
            left -= seq.len();
            out.push(seq);
        } else {
            rest.push(seq);
        }
    }
    // coin-change over the remaining lengths for the last few sequences
    let mut by_len: std::collections::BTreeMap<usize, Vec<Vec<u32>>> = Default::default();
    for s in rest {
        by_len.entry(s.len()).or_default().push(s);
    }
    let mut prev: Vec<Option<usize>> = vec![None; left + 1];
    let mut reach = vec![false; left + 1];
    reach[0] = true;
    for t in 1..=left {
        for &l in by_len.keys() {
            if l <= t && reach[t - l] {
                reach[t] = true;
                prev[t] = Some(l);
                break;
            }
        }
    }
    if !reach[left] {
        // budget smaller than any example: truncate one
        let mut seq = by_len.into_values().flatten().next().ok_or_else(|| Error::domain("empty calibration pool"))?;
        seq.truncate(left);
        out.push(seq);
        return Ok(out);
    }
    let mut t = left;
    while t > 0 {
        let l = prev[t].unwrap();
        let bucket = by_len.get_mut(&l).unwrap();
        // reuse is impossible to exhaust at these sizes, but guard anyway
        let seq = if bucket.len() > 1 { bucket.pop().unwrap() } else { bucket[0].clone() };
        out.push(seq);
        t -= l;
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex)?;
        buf.push(b'\n');
    }
    crate::packing::write_atomic(path.as_ref(), &buf)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(ex);
    }
    Ok(out)
}

/// Writes the three splits as `train.jsonl`, `eval.jsonl`, `calib.jsonl`.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_jsonl(dir.join("train.jsonl"), &ds.train)?;
    write_jsonl(dir.join("eval.jsonl"), &ds.eval)?;
    write_jsonl(dir.join("calib.jsonl"), &ds.calib)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    Ok(Dataset {
        train: read_jsonl(dir.join("train.jsonl"))?,
        eval: read_jsonl(dir.join("eval.jsonl"))?,
        calib: read_jsonl(dir.join("calib.jsonl"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> ArithTaskConfig {
        ArithTaskConfig { n_train: n, n_eval: 20, n_calib: 20, ..Default::default() }
    }

    #[test]
    fn tokenizer_roundtrip_and_errors() {
        let s = "&BOS&12+3-4=15;11&ANS&11&EOS&";
        let ids = tokenize(s).unwrap();
        assert_eq!(ids.first(), Some(&BOS));
        assert_eq!(detokenize(&ids).unwrap(), s);
        assert!(tokenize("").unwrap().is_empty());
        assert!(tokenize("x").is_err());
        assert!(tokenize("&FOO&").is_err());
        assert!(VOCAB_SIZE <= 40);
    }

    #[test]
    fn single_example_is_deterministic() {
        let cfg = ArithTaskConfig {
            n_operands: 3,
            operand_range: [0, 9],
            operators: vec![Operator::Add],
            n_train: 1,
            n_eval: 0,
            n_calib: 0,
            seed: 7,
            max_seq_len: 128,
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn traces_are_correct_and_splits_disjoint() {
        let ds = generate(&small(2000)).unwrap();
        let mut seen = BTreeSet::new();
        for ex in ds.train.iter().chain(&ds.eval).chain(&ds.calib) {
            assert!(seen.insert(ex.prompt.clone()));
            assert_eq!(ex.trace.rsplit(';').next().unwrap().parse::<i64>().unwrap(), ex.answer);
            let full = ex.full_ids();
            assert_eq!(parse_example(&full).as_ref(), Some(ex));
            assert_eq!(tokenize(&detokenize(&full).unwrap()).unwrap(), full);
            assert!(full.iter().all(|&t| (t as usize) < VOCAB_SIZE));
        }
    }

    #[test]
    fn ten_thousand_examples_fit() {
        let cfg = ArithTaskConfig { operators: vec![Operator::Add, Operator::Sub, Operator::Mul], ..small(10_000) };
        let ds = generate(&cfg).unwrap();
        assert!(ds.train.iter().all(|e| e.full_ids().len() <= 128));
    }

    #[test]
    fn unsatisfiable_configs_rejected() {
        let cfg = ArithTaskConfig { n_operands: 40, operators: vec![Operator::Mul], ..small(10) };
        assert!(generate(&cfg).is_err());
        let cfg = ArithTaskConfig { operand_range: [0, 1], n_operands: 2, operators: vec![Operator::Add], ..small(10) };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn calibration_budget_is_exact() {
        let cfg = small(500);
        let ds = generate(&cfg).unwrap();
        for kind in [CalibKind::InDomain, CalibKind::OutOfDomain] {
            for budget in [4096, 1000, 37] {
                let c = make_calibration(kind, budget, 3, &cfg, &ds).unwrap();
                assert_eq!(c.iter().map(Vec::len).sum::<usize>(), budget, "{kind:?} {budget}");
            }
        }
        let ind = make_calibration(CalibKind::InDomain, 4096, 3, &cfg, &ds).unwrap();
        assert!(ind.iter().all(|s| parse_example(s).is_some()));
        let train: BTreeSet<_> = ds.train.iter().map(|e| e.full_ids()).collect();
        assert!(ind.iter().all(|s| !train.contains(s)));
        let ood = make_calibration(CalibKind::OutOfDomain, 100 * 24, 3, &cfg, &ds).unwrap();
        assert_eq!(ood.len(), 100);
        assert!(ood.iter().all(|s| parse_example(s).is_none()));
    }

    #[test]
    fn jsonl_roundtrip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(50)).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        let a = std::fs::read(dir.path().join("train.jsonl")).unwrap();
        save_dataset(dir.path(), &generate(&small(50)).unwrap()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("train.jsonl")).unwrap(), a);

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"prompt\":\"1+1=\",\"trace\":\"2\",\"answer\":2}\nnot json\n").unwrap();
        match read_jsonl(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
