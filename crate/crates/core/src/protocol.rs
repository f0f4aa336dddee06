//! Prompt templates and the structured response grammar.
//!
//! Models answer inside a `<think>…</think><answer>…</answer>` envelope. The
//! answer body is a list of objects in a relaxed JSON dialect that accepts
//! both single- and double-quoted strings; the serializers here always emit
//! the strict double-quoted form. Parsing is total: any input yields a
//! [`FormatReport`], and a parsed value is returned only when every check
//! passed.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GridBox, GRID_SIZE};

/// Version tag of the shipped template files.
pub const TEMPLATE_VERSION: &str = "v1";

const DETECT_TEMPLATE: &str = include_str!("../templates/detect.v1.txt");
const VERIFY_TEMPLATE: &str = include_str!("../templates/verify.v1.txt");
const CLASS_SLOT: &str = "{class}";

/// Literal answer body for an empty detection list.
pub const NO_OBJECTS: &str = "No Objects";

const MAX_DEPTH: usize = 32;

fn render_template(template: &str, class_name: &str) -> Result<String> {
    if class_name.trim().is_empty() {
        return Err(Error::EmptyClassName);
    }
    Ok(template.trim_end_matches('\n').replace(CLASS_SLOT, class_name))
}

/// Detection prompt used for GRPO rollouts.
pub fn render_detection_prompt(class_name: &str) -> Result<String> {
    render_template(DETECT_TEMPLATE, class_name)
}

/// Crop verification prompt.
pub fn render_verify_prompt(class_name: &str) -> Result<String> {
    render_template(VERIFY_TEMPLATE, class_name)
}

/// Confidence with exactly two decimals, stored as hundredths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Confidence(u8);

impl TryFrom<u8> for Confidence {
    type Error = Error;

    fn try_from(hundredths: u8) -> Result<Self> {
        Confidence::from_hundredths(hundredths)
    }
}

impl From<Confidence> for u8 {
    fn from(c: Confidence) -> u8 {
        c.0
    }
}

impl Confidence {
    pub fn from_hundredths(hundredths: u8) -> Result<Self> {
        if hundredths > 100 {
            return Err(Error::OutOfRange {
                name: "confidence",
                value: f64::from(hundredths) / 100.0,
                expected: "[0, 1]",
            });
        }
        Ok(Self(hundredths))
    }

    pub fn hundredths(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 100.0
    }
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Yes,
    No,
}

impl Decision {
    pub fn is_yes(self) -> bool {
        self == Decision::Yes
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Yes => "Yes",
            Decision::No => "No",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionItem {
    pub bbox: GridBox,
    pub confidence: Confidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionResponse {
    pub think: String,
    /// Empty exactly when the answer body was `No Objects`.
    pub items: Vec<DetectionItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictResponse {
    pub think: String,
    pub decision: Decision,
    pub confidence: Confidence,
}

/// Which format checks a raw response passed. Each flag implies the ones
/// before it; a failed stage leaves the later flags false.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatReport {
    /// A complete `<think>…</think><answer>…</answer>` envelope was found.
    pub valid_envelope: bool,
    /// The answer body parses as a list under the relaxed grammar.
    pub valid_payload: bool,
    /// Every element carries exactly the required keys with the right types.
    pub required_fields: bool,
    /// Coordinates and confidences are within range and precision.
    pub value_ranges: bool,
}

impl FormatReport {
    pub fn all_passed(&self) -> bool {
        self.valid_envelope && self.valid_payload && self.required_fields && self.value_ranges
    }

    fn passed() -> Self {
        Self {
            valid_envelope: true,
            valid_payload: true,
            required_fields: true,
            value_ranges: true,
        }
    }
}

/// Parser output: the value is present iff `report.all_passed()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parsed<T> {
    pub value: Option<T>,
    pub report: FormatReport,
}

impl<T> Parsed<T> {
    fn failed(report: FormatReport) -> Self {
        Self { value: None, report }
    }
}

struct Envelope<'a> {
    think: &'a str,
    answer: &'a str,
}

/// Finds the complete envelope that ends last; ties go to the earliest start.
fn last_envelope(raw: &str) -> Option<Envelope<'_>> {
    const OPEN: &str = "<think>";
    const CLOSE: &str = "</think>";
    const ANSWER: &str = "<answer>";
    const ANSWER_END: &str = "</answer>";

    let mut best: Option<(usize, Envelope<'_>)> = None;
    for (start, _) in raw.match_indices(OPEN) {
        let think_start = start + OPEN.len();
        let Some(close) = raw[think_start..].find(CLOSE) else {
            continue;
        };
        let think = &raw[think_start..think_start + close];
        let after_think = think_start + close + CLOSE.len();
        let rest = &raw[after_think..];
        let trimmed = rest.trim_start();
        let Some(body) = trimmed.strip_prefix(ANSWER) else {
            continue;
        };
        let Some(body_len) = body.find(ANSWER_END) else {
            continue;
        };
        let body_start = after_think + (rest.len() - trimmed.len()) + ANSWER.len();
        let end = body_start + body_len + ANSWER_END.len();
        if best.as_ref().is_none_or(|(e, _)| end > *e) {
            best = Some((
                end,
                Envelope {
                    think,
                    answer: &raw[body_start..body_start + body_len],
                },
            ));
        }
    }
    best.map(|(_, env)| env)
}

#[derive(Debug, Clone, PartialEq)]
enum Value<'a> {
    Number(&'a str),
    Str(String),
    Literal(&'a str),
    List(Vec<Value<'a>>),
    Object(Vec<(String, Value<'a>)>),
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, b: u8) -> bool {
        self.skip_ws();
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn value(&mut self, depth: usize) -> Option<Value<'a>> {
        if depth > MAX_DEPTH {
            return None;
        }
        self.skip_ws();
        match self.peek()? {
            b'[' => {
                self.pos += 1;
                let mut items = Vec::new();
                if self.eat(b']') {
                    return Some(Value::List(items));
                }
                loop {
                    items.push(self.value(depth + 1)?);
                    if self.eat(b',') {
                        continue;
                    }
                    return self.eat(b']').then_some(Value::List(items));
                }
            }
            b'{' => {
                self.pos += 1;
                let mut fields = Vec::new();
                if self.eat(b'}') {
                    return Some(Value::Object(fields));
                }
                loop {
                    self.skip_ws();
                    let key = match self.peek()? {
                        q @ (b'\'' | b'"') => self.string(q)?,
                        _ => return None,
                    };
                    if !self.eat(b':') {
                        return None;
                    }
                    fields.push((key, self.value(depth + 1)?));
                    if self.eat(b',') {
                        continue;
                    }
                    return self.eat(b'}').then_some(Value::Object(fields));
                }
            }
            q @ (b'\'' | b'"') => self.string(q).map(Value::Str),
            b'-' | b'0'..=b'9' => self.number(),
            b'a'..=b'z' => {
                let start = self.pos;
                while matches!(self.peek(), Some(b'a'..=b'z')) {
                    self.pos += 1;
                }
                let word = &self.src[start..self.pos];
                matches!(word, "true" | "false" | "null").then_some(Value::Literal(word))
            }
            _ => None,
        }
    }

    fn string(&mut self, quote: u8) -> Option<String> {
        self.pos += 1;
        let mut out = String::new();
        let mut run_start = self.pos;
        loop {
            let b = self.peek()?;
            if b == quote {
                out.push_str(&self.src[run_start..self.pos]);
                self.pos += 1;
                return Some(out);
            }
            if b == b'\\' {
                out.push_str(&self.src[run_start..self.pos]);
                self.pos += 1;
                let esc = self.peek()?;
                self.pos += 1;
                match esc {
                    b'\\' | b'\'' | b'"' | b'/' => out.push(char::from(esc)),
                    b'n' => out.push('\n'),
                    b't' => out.push('\t'),
                    b'r' => out.push('\r'),
                    b'u' => {
                        let hex = self.src.get(self.pos..self.pos + 4)?;
                        let code = u32::from_str_radix(hex, 16).ok()?;
                        out.push(char::from_u32(code)?);
                        self.pos += 4;
                    }
                    _ => return None,
                }
                run_start = self.pos;
                continue;
            }
            if b < 0x20 {
                return None;
            }
            self.pos += 1;
        }
    }

    fn number(&mut self) -> Option<Value<'a>> {
        let start = self.pos;
        let digits = |lx: &mut Self| {
            let s = lx.pos;
            while matches!(lx.peek(), Some(b'0'..=b'9')) {
                lx.pos += 1;
            }
            lx.pos > s
        };
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        if !digits(self) {
            return None;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            if !digits(self) {
                return None;
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if !digits(self) {
                return None;
            }
        }
        Some(Value::Number(&self.src[start..self.pos]))
    }
}

/// Parses a whole payload; trailing non-whitespace is an error.
fn parse_payload(body: &str) -> Option<Value<'_>> {
    let mut lx = Lexer::new(body);
    let v = lx.value(0)?;
    lx.skip_ws();
    (lx.pos == body.len()).then_some(v)
}

/// Plain non-negative integer lexeme within the grid.
fn grid_coordinate(lexeme: &str) -> Option<u16> {
    if lexeme.is_empty() || lexeme.len() > 5 || !lexeme.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let v: u32 = lexeme.parse().ok()?;
    (v <= u32::from(GRID_SIZE)).then_some(v as u16)
}

/// Fixed-point lexeme in `[0, 1]` with at most two fractional digits.
fn two_decimal_confidence(lexeme: &str) -> Option<Confidence> {
    let (int, frac) = match lexeme.split_once('.') {
        Some((i, f)) => (i, f),
        None => (lexeme, ""),
    };
    let all_digits = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
    if int.is_empty() || int.len() > 3 || frac.len() > 2 || !all_digits(int) || !all_digits(frac) {
        return None;
    }
    let int: u32 = int.parse().ok()?;
    let mut hundredths = int * 100;
    for (i, b) in frac.bytes().enumerate() {
        let weight = if i == 0 { 10 } else { 1 };
        hundredths += u32::from(b - b'0') * weight;
    }
    (hundredths <= 100).then_some(Confidence(hundredths as u8))
}

/// Looks up exactly the `required` keys in an object. `None` when a key is
/// missing, repeated, or an extra key is present.
fn exact_fields<'v, 'a, const N: usize>(
    fields: &'v [(String, Value<'a>)],
    required: [&str; N],
) -> Option<[&'v Value<'a>; N]> {
    if fields.len() != N {
        return None;
    }
    let mut found: [Option<&Value<'a>>; N] = [None; N];
    for (key, value) in fields {
        let slot = required.iter().position(|r| r == key)?;
        if found[slot].replace(value).is_some() {
            return None;
        }
    }
    let mut out = [&fields[0].1; N];
    for (o, f) in out.iter_mut().zip(found) {
        *o = f?;
    }
    Some(out)
}

/// Parses a detection response.
pub fn parse_detection(raw: &str) -> Parsed<DetectionResponse> {
    let mut report = FormatReport::default();
    let Some(env) = last_envelope(raw) else {
        return Parsed::failed(report);
    };
    report.valid_envelope = true;

    let body = env.answer.trim();
    if body.eq_ignore_ascii_case(NO_OBJECTS) {
        return Parsed {
            value: Some(DetectionResponse {
                think: env.think.to_string(),
                items: Vec::new(),
            }),
            report: FormatReport::passed(),
        };
    }

    let Some(Value::List(elements)) = parse_payload(body) else {
        return Parsed::failed(report);
    };
    report.valid_payload = true;

    // An empty list must be spelled as `No Objects`.
    if elements.is_empty() {
        return Parsed::failed(report);
    }
    let mut shaped = Vec::with_capacity(elements.len());
    for el in &elements {
        let Value::Object(fields) = el else {
            return Parsed::failed(report);
        };
        let Some([pos, conf]) = exact_fields(fields, ["Position", "Confidence"]) else {
            return Parsed::failed(report);
        };
        let (Value::List(coords), Value::Number(conf)) = (pos, conf) else {
            return Parsed::failed(report);
        };
        if coords.len() != 4 {
            return Parsed::failed(report);
        }
        let mut lexemes = [""; 4];
        for (l, c) in lexemes.iter_mut().zip(coords) {
            let Value::Number(n) = c else {
                return Parsed::failed(report);
            };
            *l = n;
        }
        shaped.push((lexemes, *conf));
    }
    report.required_fields = true;

    let mut items = Vec::with_capacity(shaped.len());
    for (lexemes, conf) in shaped {
        let mut c = [0u16; 4];
        for (slot, l) in c.iter_mut().zip(lexemes) {
            let Some(v) = grid_coordinate(l) else {
                return Parsed::failed(report);
            };
            *slot = v;
        }
        let (Ok(bbox), Some(confidence)) = (GridBox::new(c[0], c[1], c[2], c[3]), two_decimal_confidence(conf)) else {
            return Parsed::failed(report);
        };
        items.push(DetectionItem { bbox, confidence });
    }
    report.value_ranges = true;

    Parsed {
        value: Some(DetectionResponse {
            think: env.think.to_string(),
            items,
        }),
        report,
    }
}

/// Parses a crop verdict. Exactly one element is required.
pub fn parse_verdict(raw: &str) -> Parsed<VerdictResponse> {
    let mut report = FormatReport::default();
    let Some(env) = last_envelope(raw) else {
        return Parsed::failed(report);
    };
    report.valid_envelope = true;

    let Some(Value::List(elements)) = parse_payload(env.answer.trim()) else {
        return Parsed::failed(report);
    };
    report.valid_payload = true;

    let [Value::Object(fields)] = elements.as_slice() else {
        return Parsed::failed(report);
    };
    let Some([Value::Str(token), Value::Number(conf)]) = exact_fields(fields, ["Decision", "Confidence"]) else {
        return Parsed::failed(report);
    };
    let decision = match token.trim() {
        t if t.eq_ignore_ascii_case("yes") => Decision::Yes,
        t if t.eq_ignore_ascii_case("no") => Decision::No,
        _ => return Parsed::failed(report),
    };
    report.required_fields = true;

    let Some(confidence) = two_decimal_confidence(conf) else {
        return Parsed::failed(report);
    };
    report.value_ranges = true;

    Parsed {
        value: Some(VerdictResponse {
            think: env.think.to_string(),
            decision,
            confidence,
        }),
        report,
    }
}

fn check_think(think: &str) -> Result<()> {
    for tag in ["<think>", "</think>", "<answer>", "</answer>"] {
        if think.contains(tag) {
            return Err(Error::Render(alloc::format!("reasoning text contains the tag {tag}")));
        }
    }
    Ok(())
}

/// Canonical answer body for a list of detections.
pub fn render_detection_answer(items: &[DetectionItem]) -> String {
    if items.is_empty() {
        return NO_OBJECTS.to_string();
    }
    let mut out = String::from("[");
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let [x1, y1, x2, y2] = item.bbox.coords();
        let _ = write!(
            out,
            "{{\"Position\": [{x1}, {y1}, {x2}, {y2}], \"Confidence\": {}}}",
            item.confidence
        );
    }
    out.push(']');
    out
}

/// Full canonical detection response including the envelope.
pub fn render_detection_response(response: &DetectionResponse) -> Result<String> {
    check_think(&response.think)?;
    Ok(alloc::format!(
        "<think>{}</think><answer>{}</answer>",
        response.think,
        render_detection_answer(&response.items)
    ))
}

/// Full canonical verdict response including the envelope.
pub fn render_verdict_response(response: &VerdictResponse) -> Result<String> {
    check_think(&response.think)?;
    Ok(alloc::format!(
        "<think>{}</think><answer>[{{\"Decision\": \"{}\", \"Confidence\": {}}}]</answer>",
        response.think,
        response.decision.as_str(),
        response.confidence
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn prompts_substitute_class() {
        let p = render_detection_prompt("polyp").unwrap();
        assert!(p.starts_with("Detect all objects of class polyp in the image."));
        assert!(p.contains("return \"No Objects\""));
        assert!(p.ends_with("</answer>"));
        let l = render_detection_prompt("lesion").unwrap();
        assert_eq!(l, p.replace("class polyp", "class lesion"));
        assert_eq!(render_detection_prompt(""), Err(Error::EmptyClassName));

        let v = render_verify_prompt("polyp").unwrap();
        assert!(v.starts_with("Examine the cropped region and decide if it contains a polyp."));
        assert_eq!(v, render_verify_prompt("polyp").unwrap());
        assert_eq!(render_verify_prompt(" \t"), Err(Error::EmptyClassName));
    }

    #[test]
    fn detection_examples() {
        let p = parse_detection("<think>ok</think><answer>[{'Position': [100,200,300,400], 'Confidence': 0.85}]</answer>");
        assert!(p.report.all_passed());
        let r = p.value.unwrap();
        assert_eq!(r.think, "ok");
        assert_eq!(r.items.len(), 1);
        assert_eq!(r.items[0].bbox.coords(), [100, 200, 300, 400]);
        assert_eq!(r.items[0].confidence.hundredths(), 85);

        let p = parse_detection("<think>x</think><answer>No Objects</answer>");
        assert!(p.report.all_passed());
        assert!(p.value.unwrap().items.is_empty());
        let p = parse_detection("<think>x</think><answer>  no objects \n</answer>");
        assert!(p.report.all_passed());

        let p = parse_detection("<think>x</think><answer>[{'Position': [1,2,3,4], 'Confidence': 0.5}]");
        assert!(p.value.is_none());
        assert_eq!(p.report, FormatReport::default());
    }

    #[test]
    fn detection_flag_stages() {
        let env = |body: &str| parse_detection(&alloc::format!("<think>t</think><answer>{body}</answer>")).report;

        let r = env("[{'Position': [1,2,3,4]]");
        assert!(r.valid_envelope && !r.valid_payload);

        let r = env("[{'Position': [1,2,3,4]}]");
        assert!(r.valid_payload && !r.required_fields);
        let r = env("[{'Position': [1,2,3,4], 'Confidence': 0.5, 'Extra': 1}]");
        assert!(!r.required_fields);
        let r = env("[{'Position': [1,2,3], 'Confidence': 0.5}]");
        assert!(!r.required_fields);
        let r = env("[]");
        assert!(r.valid_payload && !r.required_fields);

        let r = env("[{'Position': [1,2,3,4], 'Confidence': 1.5}]");
        assert!(r.required_fields && !r.value_ranges);
        let r = env("[{'Position': [1,2,3,4], 'Confidence': 0.855}]");
        assert!(r.required_fields && !r.value_ranges);
        let r = env("[{'Position': [1,2,3,1001], 'Confidence': 0.5}]");
        assert!(!r.value_ranges);
        let r = env("[{'Position': [5,2,3,4], 'Confidence': 0.5}]");
        assert!(!r.value_ranges);
        let r = env("[{'Position': [1.5,2,3,4], 'Confidence': 0.5}]");
        assert!(!r.value_ranges);
        let r = env("[{\"Position\": [0, 0, 1000, 1000], \"Confidence\": 1}]");
        assert!(r.all_passed());
    }

    #[test]
    fn last_complete_envelope_wins() {
        let raw = "<think>draft</think><answer>No Objects</answer> then \
                   <think>final</think>\n<answer>[{'Position': [1,2,3,4], 'Confidence': 0.5}]</answer> <think>cut";
        let p = parse_detection(raw);
        assert!(p.report.all_passed());
        let r = p.value.unwrap();
        assert_eq!(r.think, "final");
        assert_eq!(r.items.len(), 1);
    }

    #[test]
    fn verdict_examples() {
        let p = parse_verdict("<think>looks raised</think><answer>[{'Decision': 'Yes', 'Confidence': 0.91}]</answer>");
        assert!(p.report.all_passed());
        let v = p.value.unwrap();
        assert_eq!(v.decision, Decision::Yes);
        assert_eq!(v.confidence.hundredths(), 91);

        let p = parse_verdict("<think></think><answer>[{'Decision': 'maybe', 'Confidence': 0.91}]</answer>");
        assert!(p.report.valid_payload && !p.report.required_fields);
        let p = parse_verdict("<think></think><answer>[{'Decision': 'no', 'Confidence': 1.50}]</answer>");
        assert!(p.report.required_fields && !p.report.value_ranges);
        let p = parse_verdict(
            "<think></think><answer>[{'Decision': 'No', 'Confidence': 0.1}, {'Decision': 'No', 'Confidence': 0.1}]</answer>",
        );
        assert!(!p.report.required_fields);
        let p = parse_verdict("<think></think><answer>[{'Decision': 'NO', 'Confidence': 0.10}]</answer>");
        assert_eq!(p.value.unwrap().decision, Decision::No);
    }

    #[test]
    fn render_examples() {
        assert_eq!(render_detection_answer(&[]), "No Objects");
        let item = DetectionItem {
            bbox: GridBox::new(100, 200, 300, 400).unwrap(),
            confidence: Confidence::from_hundredths(5).unwrap(),
        };
        assert_eq!(
            render_detection_answer(&[item]),
            r#"[{"Position": [100, 200, 300, 400], "Confidence": 0.05}]"#
        );
        let bad = DetectionResponse {
            think: "a</think>".into(),
            items: vec![],
        };
        assert!(render_detection_response(&bad).is_err());
    }

    #[test]
    fn string_escapes_and_nesting_limit() {
        let p = parse_verdict(r#"<think></think><answer>[{"Decision": "Yes", "Confidence": 0.5}]</answer>"#);
        assert_eq!(p.value.unwrap().decision, Decision::Yes);
        let deep = alloc::format!("<think></think><answer>{}</answer>", "[".repeat(10_000));
        assert!(!parse_detection(&deep).report.valid_payload);
    }

    fn arb_item() -> impl Strategy<Value = DetectionItem> {
        (0u16..=1000, 0u16..=1000, 0u16..=1000, 0u16..=1000, 0u8..=100).prop_map(|(a, b, c, d, h)| DetectionItem {
            bbox: GridBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).unwrap(),
            confidence: Confidence::from_hundredths(h).unwrap(),
        })
    }

    proptest! {
        #[test]
        fn detection_round_trip(items in proptest::collection::vec(arb_item(), 0..100), think in "[a-zA-Z0-9 .,]{0,40}") {
            let r = DetectionResponse { think, items };
            let parsed = parse_detection(&render_detection_response(&r).unwrap());
            prop_assert!(parsed.report.all_passed());
            prop_assert_eq!(parsed.value, Some(r));
        }

        #[test]
        fn parsers_are_total(s in "\\PC{0,200}") {
            let d = parse_detection(&s);
            prop_assert_eq!(d.value.is_some(), d.report.all_passed());
            let v = parse_verdict(&s);
            prop_assert_eq!(v.value.is_some(), v.report.all_passed());
        }
    }
}
