use std::collections::BTreeMap;

use sl_audit::carenet::{build_graph, to_dot, to_gexf, top_fraction_floor, CareGraph};
use sl_audit::corpus::{export, ingest, parse_jsonl, to_jsonl, window_filter};
use sl_audit::lexicon::SlLexicon;
use sl_audit::synthgen::{generate, SynthConfig};
use sl_audit::Error;

fn synth(note_count: usize, seed: u64) -> sl_audit::corpus::Corpus {
    generate(&SynthConfig {
        note_count,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn ten_thousand_notes_round_trip_byte_for_byte() {
    let c = synth(10_000, 1);
    assert_eq!(c.len(), 10_000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    export(&c, &path).unwrap();
    let back = ingest(&path).unwrap();
    assert!(back.notes == c.notes, "notes differ after round trip");
    assert_eq!(std::fs::read_to_string(&path).unwrap(), to_jsonl(&back));
}

#[test]
fn jsonl_field_order_is_fixed() {
    let c = synth(3, 2);
    let first = to_jsonl(&c).lines().next().unwrap().to_string();
    let keys = [
        "note_id",
        "patient_id",
        "clinician_ids",
        "category",
        "group",
        "label",
        "window_hours",
        "text",
    ];
    let positions: Vec<usize> = keys.iter().map(|k| first.find(&format!("\"{k}\":")).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn malformed_lines_report_their_number() {
    let good = to_jsonl(&synth(2, 3));
    let bad = format!("{good}{{\"note_id\": \"x\"}}\n");
    match parse_jsonl(bad.as_bytes()) {
        Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    let dup = format!("{good}{}\n", good.lines().next().unwrap());
    assert!(matches!(parse_jsonl(dup.as_bytes()), Err(Error::DuplicateNoteId(_))));
    let label = good
        .lines()
        .next()
        .unwrap()
        .replace("\"label\":0", "\"label\":2")
        .replace("\"label\":1", "\"label\":2");
    assert!(matches!(
        parse_jsonl(label.as_bytes()),
        Err(Error::MalformedLine { line: 1, .. })
    ));
}

#[test]
fn window_filter_keeps_exactly_the_early_notes() {
    let c = synth(3000, 4);
    let early = c.notes.iter().filter(|n| n.window_hours <= 24.0).count();
    let late = c.len() - early;
    assert!((late as f64 / c.len() as f64 - 0.3).abs() < 0.04);
    assert_eq!(window_filter(&c, 24.0).unwrap().len(), early);
    assert_eq!(window_filter(&c, f64::INFINITY).unwrap().len(), c.len());
    assert!(window_filter(&c, 0.0).is_err());
}

fn small_graph() -> CareGraph {
    let c = synth(300, 5);
    build_graph(&c, &SlLexicon::default())
}

type EdgeSet = BTreeMap<(String, String), u64>;

fn sorted_pair(a: &str, b: &str) -> (String, String) {
    if a < b {
        (a.into(), b.into())
    } else {
        (b.into(), a.into())
    }
}

fn kept(g: &CareGraph, floor: Option<f64>) -> EdgeSet {
    g.edges
        .iter()
        .filter(|(_, &w)| floor.is_none_or(|f| w as f64 > f))
        .map(|(k, &w)| (k.clone(), w))
        .collect()
}

#[test]
fn gexf_reparses_to_the_same_graph() {
    let g = small_graph();
    for floor in [None, Some(top_fraction_floor(&g, 0.2))] {
        let xml = to_gexf(&g, floor);
        let doc = roxmltree::Document::parse(&xml).unwrap();
        let root = doc.root_element();
        assert_eq!(root.tag_name().namespace(), Some("http://www.gexf.net/1.2draft"));
        let mut titles = BTreeMap::new();
        for a in doc.descendants().filter(|n| n.has_tag_name("attribute")) {
            titles.insert(
                a.attribute("id").unwrap().to_string(),
                a.attribute("title").unwrap().to_string(),
            );
        }
        let mut nodes = BTreeMap::new();
        for n in doc.descendants().filter(|n| n.has_tag_name("node")) {
            let attrs: BTreeMap<String, String> = n
                .descendants()
                .filter(|v| v.has_tag_name("attvalue"))
                .map(|v| {
                    (
                        titles[v.attribute("for").unwrap()].clone(),
                        v.attribute("value").unwrap().to_string(),
                    )
                })
                .collect();
            nodes.insert(n.attribute("id").unwrap().to_string(), attrs);
        }
        assert_eq!(nodes.len(), g.nodes.len());
        for (id, node) in &g.nodes {
            let a = &nodes[id];
            assert_eq!(a["role"], node.role.as_str());
            assert_eq!(a["wrote_sl"], node.wrote_sl.to_string());
            assert_eq!(a["strength"], node.strength.to_string());
            assert_eq!(a["note_count"], node.note_count.to_string());
        }
        let edges: EdgeSet = doc
            .descendants()
            .filter(|n| n.has_tag_name("edge"))
            .map(|e| {
                (
                    sorted_pair(e.attribute("source").unwrap(), e.attribute("target").unwrap()),
                    e.attribute("weight").unwrap().parse().unwrap(),
                )
            })
            .collect();
        assert_eq!(edges, kept(&g, floor));
    }
}

fn unquote(s: &str) -> String {
    s.trim().trim_matches('"').replace("\\\"", "\"").replace("\\\\", "\\")
}

#[test]
fn dot_reparses_to_the_same_graph() {
    let g = small_graph();
    let floor = Some(top_fraction_floor(&g, 0.1));
    let dot = to_dot(&g, floor);
    let body: Vec<&str> = dot.lines().collect();
    assert_eq!(body.first(), Some(&"graph care {"));
    assert_eq!(body.last(), Some(&"}"));
    let mut nodes = 0;
    let mut edges = EdgeSet::new();
    for line in &body[1..body.len() - 1] {
        let line = line.trim().trim_end_matches(';');
        let (head, attrs) = line.split_once(" [").unwrap();
        let attrs: BTreeMap<&str, &str> = attrs
            .trim_end_matches(']')
            .split(", ")
            .map(|kv| kv.split_once('=').unwrap())
            .collect();
        if let Some((a, b)) = head.split_once(" -- ") {
            edges.insert(sorted_pair(&unquote(a), &unquote(b)), attrs["weight"].parse().unwrap());
        } else {
            let node = &g.nodes[&unquote(head)];
            assert_eq!(attrs["strength"].parse::<u64>().unwrap(), node.strength);
            assert_eq!(unquote(attrs["role"]), node.role.as_str());
            nodes += 1;
        }
    }
    assert_eq!(nodes, g.nodes.len());
    assert_eq!(edges, kept(&g, floor));
    assert!(edges.len() < g.edges.len());
}

#[test]
fn graph_json_round_trips() {
    let g = small_graph();
    let json = serde_json::to_string(&g).unwrap();
    let back: CareGraph = serde_json::from_str(&json).unwrap();
    assert_eq!(back, g);
}
