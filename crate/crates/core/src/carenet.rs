//! Clinician co-treatment graph, node-strength centrality, SL authorship and
//! graph export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize_note, Corpus, Note};
use crate::error::{Error, Result};
use crate::lexicon::{is_sl_note, remove_sl_text, SlLexicon};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Physician,
    Nurse,
    Other,
}

impl Role {
    pub fn from_category(category: &str) -> Role {
        let c = category.trim().to_lowercase();
        if c.starts_with("physician") {
            Role::Physician
        } else if c == "nursing" || c == "nursing/other" || c == "nurse" {
            Role::Nurse
        } else {
            Role::Other
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Physician => "physician",
            Role::Nurse => "nurse",
            Role::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicianNode {
    pub id: String,
    /// Most frequent role across the clinician's notes; ties go to the
    /// earlier of physician, nurse, other.
    pub role: Role,
    pub wrote_sl: bool,
    pub note_count: u64,
    pub strength: u64,
}

/// Undirected weighted graph. Edge keys are ordered pairs `(a, b)` with `a < b`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "GraphDoc", try_from = "GraphDoc")]
pub struct CareGraph {
    pub nodes: BTreeMap<String, ClinicianNode>,
    pub edges: BTreeMap<(String, String), u64>,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    nodes: Vec<ClinicianNode>,
    edges: Vec<EdgeDoc>,
}

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    source: String,
    target: String,
    weight: u64,
}

impl From<CareGraph> for GraphDoc {
    fn from(g: CareGraph) -> Self {
        GraphDoc {
            nodes: g.nodes.into_values().collect(),
            edges: g
                .edges
                .into_iter()
                .map(|((source, target), weight)| EdgeDoc { source, target, weight })
                .collect(),
        }
    }
}

impl TryFrom<GraphDoc> for CareGraph {
    type Error = Error;

    fn try_from(doc: GraphDoc) -> Result<Self> {
        let nodes: BTreeMap<String, ClinicianNode> = doc.nodes.into_iter().map(|n| (n.id.clone(), n)).collect();
        let mut edges = BTreeMap::new();
        for e in doc.edges {
            if e.source == e.target || e.weight == 0 {
                return Err(Error::InvalidInput(format!("bad edge {} -- {}", e.source, e.target)));
            }
            for end in [&e.source, &e.target] {
                if !nodes.contains_key(end) {
                    return Err(Error::InvalidInput(format!("edge endpoint {end:?} is not a node")));
                }
            }
            edges.insert(edge_key(&e.source, &e.target), e.weight);
        }
        let g = CareGraph { nodes, edges };
        for n in g.nodes.values() {
            if n.strength != g.incident_weight(&n.id) {
                return Err(Error::InvalidInput(format!(
                    "strength of {:?} disagrees with its edges",
                    n.id
                )));
            }
        }
        Ok(g)
    }
}

fn edge_key(a: &str, b: &str) -> (String, String) {
    if a < b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl CareGraph {
    pub fn weight(&self, a: &str, b: &str) -> u64 {
        self.edges.get(&edge_key(a, b)).copied().unwrap_or(0)
    }

    pub fn strength(&self, id: &str) -> Option<u64> {
        self.nodes.get(id).map(|n| n.strength)
    }

    fn incident_weight(&self, id: &str) -> u64 {
        self.edges
            .iter()
            .filter(|((a, b), _)| a == id || b == id)
            .map(|(_, w)| w)
            .sum()
    }

    pub fn max_weight(&self) -> u64 {
        self.edges.values().copied().max().unwrap_or(0)
    }
}

/// Builds the co-treatment graph: two clinicians share an edge weighted by
/// the number of distinct patients on whose notes both appear.
pub fn build_graph(corpus: &Corpus, lex: &SlLexicon) -> CareGraph {
    let mut rosters: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut nodes: BTreeMap<String, ClinicianNode> = BTreeMap::new();
    let mut role_votes: BTreeMap<&str, [u64; 3]> = BTreeMap::new();
    for note in &corpus.notes {
        if note.clinician_ids.is_empty() {
            continue;
        }
        let sl = is_sl_note(&tokenize_note(note), lex);
        let role = Role::from_category(&note.category);
        let roster = rosters.entry(note.patient_id.as_str()).or_default();
        let ids: BTreeSet<&str> = note.clinician_ids.iter().map(String::as_str).collect();
        for id in ids {
            roster.insert(id);
            let node = nodes.entry(id.to_string()).or_insert_with(|| ClinicianNode {
                id: id.to_string(),
                role: Role::Other,
                wrote_sl: false,
                note_count: 0,
                strength: 0,
            });
            node.note_count += 1;
            node.wrote_sl |= sl;
            role_votes.entry(id).or_default()[role as usize] += 1;
        }
    }
    for (id, votes) in role_votes {
        let best = (0..3).max_by_key(|&i| (votes[i], std::cmp::Reverse(i))).unwrap_or(2);
        nodes.get_mut(id).expect("voted node exists").role = [Role::Physician, Role::Nurse, Role::Other][best];
    }
    let mut edges: BTreeMap<(String, String), u64> = BTreeMap::new();
    for roster in rosters.values() {
        let members: Vec<&str> = roster.iter().copied().collect();
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                *edges.entry(((*a).to_string(), (*b).to_string())).or_insert(0) += 1;
            }
        }
    }
    for ((a, b), w) in &edges {
        nodes.get_mut(a).expect("edge endpoint").strength += w;
        nodes.get_mut(b).expect("edge endpoint").strength += w;
    }
    CareGraph { nodes, edges }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralitySplit {
    /// Mean node strength.
    pub threshold: f64,
    pub central: BTreeSet<String>,
    pub non_central: BTreeSet<String>,
}

impl CentralitySplit {
    pub fn is_central(&self, id: &str) -> bool {
        self.central.contains(id)
    }

    /// True when any clinician on the note is central.
    pub fn note_is_central(&self, note: &Note) -> bool {
        note.clinician_ids.iter().any(|c| self.is_central(c))
    }
}

/// Central clinicians have strength strictly above the mean. The comparison
/// is done in integers (`strength * n > total`), so it is exact.
pub fn centrality_split(g: &CareGraph) -> Result<CentralitySplit> {
    if g.nodes.is_empty() {
        return Err(Error::InvalidInput("centrality needs at least one clinician".into()));
    }
    let n = g.nodes.len() as u128;
    let total: u128 = g.nodes.values().map(|c| c.strength as u128).sum();
    let (central, non_central): (Vec<&ClinicianNode>, Vec<&ClinicianNode>) =
        g.nodes.values().partition(|c| c.strength as u128 * n > total);
    Ok(CentralitySplit {
        threshold: total as f64 / n as f64,
        central: central.into_iter().map(|c| c.id.clone()).collect(),
        non_central: non_central.into_iter().map(|c| c.id.clone()).collect(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub clinicians: usize,
    pub sl_clinicians: usize,
    /// Absent when the class has no clinicians.
    pub sl_clinician_pct: Option<f64>,
    pub notes: usize,
    /// Share of all attributed notes.
    pub note_pct: Option<f64>,
    pub sl_notes: usize,
    pub sl_note_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassComparison {
    pub central: ClassStats,
    pub non_central: ClassStats,
    /// Central minus non-central, percentage points; absent when either side is.
    pub sl_clinician_diff_pp: Option<f64>,
    pub sl_note_diff_pp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralityStats {
    pub threshold: f64,
    pub overall: ClassComparison,
    pub by_role: BTreeMap<Role, ClassComparison>,
    /// Notes without any clinician in the graph.
    pub unattributed_notes: usize,
}

fn pct(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

fn compare(central: ClassStats, non_central: ClassStats) -> ClassComparison {
    ClassComparison {
        sl_clinician_diff_pp: diff(central.sl_clinician_pct, non_central.sl_clinician_pct),
        sl_note_diff_pp: diff(central.sl_note_pct, non_central.sl_note_pct),
        central,
        non_central,
    }
}

pub fn centrality_sl_stats(g: &CareGraph, corpus: &Corpus, lex: &SlLexicon) -> Result<CentralityStats> {
    Ok(centrality_sl_stats_with(g, &centrality_split(g)?, corpus, lex))
}

/// Per-class clinician and note statistics for a given split. A note counts
/// toward the central class when any of its clinicians is central; within a
/// role, only that role's clinicians are considered.
pub fn centrality_sl_stats_with(
    g: &CareGraph,
    split: &CentralitySplit,
    corpus: &Corpus,
    lex: &SlLexicon,
) -> CentralityStats {
    let note_sl: Vec<bool> = corpus
        .notes
        .iter()
        .map(|n| is_sl_note(&tokenize_note(n), lex))
        .collect();
    let mut unattributed = 0;
    for n in &corpus.notes {
        if !n.clinician_ids.iter().any(|c| g.nodes.contains_key(c)) {
            unattributed += 1;
        }
    }

    let class_stats = |role: Option<Role>| -> ClassComparison {
        let in_role = |id: &str| g.nodes.get(id).is_some_and(|c| role.is_none_or(|r| c.role == r));
        let mut sides = [ClassStats::default(), ClassStats::default()];
        for c in g.nodes.values().filter(|c| in_role(&c.id)) {
            let side = &mut sides[!split.is_central(&c.id) as usize];
            side.clinicians += 1;
            side.sl_clinicians += c.wrote_sl as usize;
        }
        let mut attributed = 0;
        for (n, &sl) in corpus.notes.iter().zip(&note_sl) {
            let members: Vec<&String> = n.clinician_ids.iter().filter(|c| in_role(c)).collect();
            if members.is_empty() {
                continue;
            }
            attributed += 1;
            let side = &mut sides[!members.iter().any(|c| split.is_central(c)) as usize];
            side.notes += 1;
            side.sl_notes += sl as usize;
        }
        for side in &mut sides {
            side.sl_clinician_pct = pct(side.sl_clinicians, side.clinicians);
            side.note_pct = pct(side.notes, attributed);
            side.sl_note_pct = pct(side.sl_notes, side.notes);
        }
        let [central, non_central] = sides;
        compare(central, non_central)
    };

    let roles: BTreeSet<Role> = g.nodes.values().map(|c| c.role).collect();
    CentralityStats {
        threshold: split.threshold,
        overall: class_stats(None),
        by_role: roles.into_iter().map(|r| (r, class_stats(Some(r)))).collect(),
        unattributed_notes: unattributed,
    }
}

/// Removes SL only from notes with at least one central clinician. Other
/// notes are returned byte-identical.
pub fn central_sl_removal(corpus: &Corpus, g: &CareGraph, lex: &SlLexicon) -> Result<Corpus> {
    let split = centrality_split(g)?;
    Ok(corpus.map_text("central_sl_removed", |n| {
        if split.note_is_central(n) {
            remove_sl_text(&n.text, lex)
        } else {
            n.text.clone()
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Gexf,
    Dot,
}

/// Weight floor that keeps roughly the heaviest `fraction` of edges when
/// edges with weight strictly above it are exported.
pub fn top_fraction_floor(g: &CareGraph, fraction: f64) -> f64 {
    let mut weights: Vec<u64> = g.edges.values().copied().collect();
    weights.sort_unstable_by(|a, b| b.cmp(a));
    let keep = (fraction.clamp(0.0, 1.0) * weights.len() as f64).ceil() as usize;
    match weights.get(keep) {
        Some(&w) if keep > 0 => w as f64,
        Some(&w) => w as f64 + 1.0,
        None => 0.0,
    }
}

fn kept_edges(g: &CareGraph, floor: Option<f64>) -> impl Iterator<Item = (&(String, String), &u64)> {
    g.edges.iter().filter(move |(_, &w)| floor.is_none_or(|f| w as f64 > f))
}

fn dot_quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

pub fn to_dot(g: &CareGraph, floor: Option<f64>) -> String {
    let mut out = String::from("graph care {\n");
    for n in g.nodes.values() {
        let _ = writeln!(
            out,
            "  {} [role={}, wrote_sl={}, strength={}, note_count={}];",
            dot_quote(&n.id),
            dot_quote(n.role.as_str()),
            n.wrote_sl,
            n.strength,
            n.note_count
        );
    }
    for ((a, b), w) in kept_edges(g, floor) {
        let _ = writeln!(out, "  {} -- {} [weight={w}];", dot_quote(a), dot_quote(b));
    }
    out.push_str("}\n");
    out
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

pub fn to_gexf(g: &CareGraph, floor: Option<f64>) -> String {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str("<gexf xmlns=\"http://www.gexf.net/1.2draft\" version=\"1.2\">\n");
    out.push_str("  <graph mode=\"static\" defaultedgetype=\"undirected\">\n");
    out.push_str("    <attributes class=\"node\">\n");
    for (i, (title, ty)) in [
        ("role", "string"),
        ("wrote_sl", "boolean"),
        ("strength", "long"),
        ("note_count", "long"),
    ]
    .iter()
    .enumerate()
    {
        let _ = writeln!(out, "      <attribute id=\"{i}\" title=\"{title}\" type=\"{ty}\"/>");
    }
    out.push_str("    </attributes>\n    <nodes>\n");
    for n in g.nodes.values() {
        let id = xml_escape(&n.id);
        let _ = writeln!(out, "      <node id=\"{id}\" label=\"{id}\">");
        out.push_str("        <attvalues>\n");
        let values = [
            n.role.as_str().to_string(),
            n.wrote_sl.to_string(),
            n.strength.to_string(),
            n.note_count.to_string(),
        ];
        for (i, v) in values.iter().enumerate() {
            let _ = writeln!(out, "          <attvalue for=\"{i}\" value=\"{v}\"/>");
        }
        out.push_str("        </attvalues>\n      </node>\n");
    }
    out.push_str("    </nodes>\n    <edges>\n");
    for (i, ((a, b), w)) in kept_edges(g, floor).enumerate() {
        let _ = writeln!(
            out,
            "      <edge id=\"{i}\" source=\"{}\" target=\"{}\" weight=\"{w}\"/>",
            xml_escape(a),
            xml_escape(b)
        );
    }
    out.push_str("    </edges>\n  </graph>\n</gexf>\n");
    out
}

pub fn export_graph(g: &CareGraph, format: GraphFormat, floor: Option<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        GraphFormat::Gexf => to_gexf(g, floor),
        GraphFormat::Dot => to_dot(g, floor),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn note(id: &str, patient: &str, clinicians: &[&str], category: &str, text: &str) -> Note {
        Note {
            note_id: id.into(),
            patient_id: patient.into(),
            clinician_ids: clinicians.iter().map(|c| c.to_string()).collect(),
            category: category.into(),
            group: "white".into(),
            label: 0,
            window_hours: 1.0,
            text: text.into(),
        }
    }

    fn triangle_corpus() -> Corpus {
        Corpus::new(
            vec![
                note("n1", "p1", &["A", "B"], "Physician", "stable"),
                note("n2", "p1", &["C"], "Nursing", "pt was combative"),
                note("n3", "p2", &["A", "B"], "Physician", "stable"),
                note("n4", "p2", &["A"], "Nursing", "stable"),
            ],
            "original",
        )
        .unwrap()
    }

    #[test]
    fn definitional_counting() {
        let g = build_graph(&triangle_corpus(), &SlLexicon::default());
        assert_eq!(g.weight("A", "B"), 2);
        assert_eq!(g.weight("A", "C"), 1);
        assert_eq!(g.weight("B", "C"), 1);
        assert_eq!(g.strength("A"), Some(3));
        assert!(g.nodes["C"].wrote_sl);
        assert!(!g.nodes["A"].wrote_sl);
        assert_eq!(g.nodes["A"].note_count, 3);
        assert_eq!(g.nodes["A"].role, Role::Physician);
        assert_eq!(g.nodes["C"].role, Role::Nurse);
    }

    fn graph_with_strengths(strengths: &[u64]) -> CareGraph {
        let nodes = strengths
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let id = format!("c{i}");
                (
                    id.clone(),
                    ClinicianNode {
                        id,
                        role: Role::Other,
                        wrote_sl: false,
                        note_count: 1,
                        strength: s,
                    },
                )
            })
            .collect();
        CareGraph {
            nodes,
            edges: BTreeMap::new(),
        }
    }

    #[test]
    fn strict_mean_threshold() {
        let s = centrality_split(&graph_with_strengths(&[3, 4, 5])).unwrap();
        assert_eq!(s.threshold, 4.0);
        assert_eq!(s.central, BTreeSet::from(["c2".to_string()]));
        let s = centrality_split(&graph_with_strengths(&[7, 7, 7])).unwrap();
        assert!(s.central.is_empty());
        assert_eq!(s.non_central.len(), 3);
        assert!(centrality_split(&CareGraph::default()).is_err());
    }

    #[test]
    fn stats_fixture() {
        let mut g = graph_with_strengths(&[9, 9, 1, 1]);
        for (id, sl) in [("c0", true), ("c1", true), ("c2", true), ("c3", false)] {
            g.nodes.get_mut(id).unwrap().wrote_sl = sl;
        }
        let c = Corpus::new(
            vec![
                note("a", "p", &["c0"], "Other", "abuser"),
                note("b", "p", &["c2"], "Other", "fine"),
                note("c", "p", &["c3"], "Other", "fine"),
            ],
            "original",
        )
        .unwrap();
        let s = centrality_sl_stats(&g, &c, &SlLexicon::default()).unwrap();
        assert_eq!(s.overall.central.sl_clinician_pct, Some(100.0));
        assert_eq!(s.overall.non_central.sl_clinician_pct, Some(50.0));
        assert_eq!(s.overall.sl_clinician_diff_pp, Some(50.0));
        assert_eq!(s.overall.central.sl_note_pct, Some(100.0));
        assert_eq!(s.overall.non_central.notes, 2);
    }

    #[test]
    fn all_central_leaves_difference_undefined() {
        let mut g = graph_with_strengths(&[2, 2]);
        g.nodes.values_mut().for_each(|n| n.wrote_sl = true);
        let split = CentralitySplit {
            threshold: 0.0,
            central: g.nodes.keys().cloned().collect(),
            non_central: BTreeSet::new(),
        };
        let s = centrality_sl_stats_with(&g, &split, &Corpus::default(), &SlLexicon::default());
        assert_eq!(s.overall.central.sl_clinician_pct, Some(100.0));
        assert_eq!(s.overall.non_central.sl_clinician_pct, None);
        assert_eq!(s.overall.sl_clinician_diff_pp, None);
    }

    #[test]
    fn central_removal_selects_notes() {
        let c = Corpus::new(
            vec![
                note("n1", "p1", &["hub", "s1"], "Nursing", "He was very combative."),
                note("n2", "p2", &["hub", "s2"], "Nursing", "stable"),
                note("n3", "p3", &["hub", "s3"], "Nursing", "stable"),
                note("n4", "p3", &["s4"], "Nursing", "He was very Combative."),
            ],
            "original",
        )
        .unwrap();
        let lex = SlLexicon::default();
        let g = build_graph(&c, &lex);
        assert!(centrality_split(&g).unwrap().is_central("hub"));
        let out = central_sl_removal(&c, &g, &lex).unwrap();
        assert_eq!(out.variant_tag, "central_sl_removed");
        assert_eq!(out.notes[0].text, "he was very .");
        assert_eq!(out.notes[1].text, "stable");
        assert_eq!(out.notes[3].text, "He was very Combative.");
    }

    #[test]
    fn dot_triangle_and_floor() {
        let g = build_graph(&triangle_corpus(), &SlLexicon::default());
        let dot = to_dot(&g, None);
        assert_eq!(dot.matches(" -- ").count(), 3);
        assert_eq!(dot.matches("strength=").count(), 3);
        let none = to_dot(&g, Some(g.max_weight() as f64));
        assert_eq!(none.matches(" -- ").count(), 0);
        assert_eq!(none.matches("strength=").count(), 3);
    }

    #[test]
    fn top_fraction_keeps_heaviest() {
        let g = build_graph(&triangle_corpus(), &SlLexicon::default());
        let floor = top_fraction_floor(&g, 0.1);
        let kept: Vec<_> = kept_edges(&g, Some(floor)).collect();
        assert_eq!(kept.len(), 1);
        assert_eq!(*kept[0].1, 2);
        assert_eq!(top_fraction_floor(&g, 1.0), 0.0);
        assert_eq!(kept_edges(&g, Some(top_fraction_floor(&g, 0.0))).count(), 0);
    }

    #[test]
    fn json_round_trip() {
        let g = build_graph(&triangle_corpus(), &SlLexicon::default());
        let back: CareGraph = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
