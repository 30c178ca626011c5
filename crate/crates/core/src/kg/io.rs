use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Interner, KnowledgeGraph, TextStore, Triple, TripleSplit};
use crate::error::{Error, Result};

/// Input files of a dataset. Triple files are `head<TAB>relation<TAB>tail`,
/// text files `name<TAB>text`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub entity_text: Option<PathBuf>,
    pub relation_text: Option<PathBuf>,
}

impl DatasetPaths {
    /// `train.tsv`, `valid.tsv`, `test.tsv`, `entity_text.tsv`,
    /// `relation_text.tsv` under `dir` (text files only if present).
    pub fn in_dir(dir: &Path) -> Self {
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        Self {
            train: dir.join("train.tsv"),
            valid: dir.join("valid.tsv"),
            test: dir.join("test.tsv"),
            entity_text: opt("entity_text.tsv"),
            relation_text: opt("relation_text.tsv"),
        }
    }
}

/// Counters collected while loading.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct LoadReport {
    pub duplicates_removed: [usize; 3],
    /// Entities that appear in valid/test but not in train.
    pub unseen_entities: Vec<usize>,
    pub unseen_relations: Vec<usize>,
    pub empty_entity_text: usize,
    pub empty_relation_text: usize,
}

type RawTriple = (String, String, String);

/// Reads a TSV triple file; errors carry the 1-based line number.
pub fn read_triples(path: &Path) -> Result<Vec<RawTriple>> {
    let content = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 || parts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected head<TAB>relation<TAB>tail, got {line:?}"),
            });
        }
        out.push((
            parts[0].trim().to_string(),
            parts[1].trim().to_string(),
            parts[2].trim().to_string(),
        ));
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<Vec<(String, String)>> {
    let content = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((name, text)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected name<TAB>text".into(),
            });
        };
        out.push((name.trim().to_string(), text.trim().to_string()));
    }
    Ok(out)
}

fn intern_split(
    raw: &[RawTriple],
    ents: &mut Interner,
    rels: &mut Interner,
) -> (Vec<Triple>, usize) {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(raw.len());
    let mut dups = 0;
    for (h, r, t) in raw {
        let tr = Triple::new(ents.intern(h), rels.intern(r), ents.intern(t));
        if seen.insert(tr) {
            out.push(tr);
        } else {
            dups += 1;
        }
    }
    (out, dups)
}

/// Loads the three splits and the text files. Vocabularies are the union of
/// all splits and text files, in order of first appearance; the graph stores
/// the training triples.
pub fn load_dataset(paths: &DatasetPaths) -> Result<(KnowledgeGraph, TripleSplit, LoadReport)> {
    let mut ents = Interner::default();
    let mut rels = Interner::default();
    let mut report = LoadReport::default();

    let (train, d0) = intern_split(&read_triples(&paths.train)?, &mut ents, &mut rels);
    let train_ents = ents.len();
    let train_rels = rels.len();
    let (valid, d1) = intern_split(&read_triples(&paths.valid)?, &mut ents, &mut rels);
    let (test, d2) = intern_split(&read_triples(&paths.test)?, &mut ents, &mut rels);
    report.duplicates_removed = [d0, d1, d2];
    for (name, d) in ["train", "valid", "test"].iter().zip([d0, d1, d2]) {
        if d > 0 {
            log::warn!("removed {d} duplicate triples from {name}");
        }
    }

    let entity_text = match &paths.entity_text {
        Some(p) => read_text(p)?,
        None => Vec::new(),
    };
    let relation_text = match &paths.relation_text {
        Some(p) => read_text(p)?,
        None => Vec::new(),
    };
    for (name, _) in &entity_text {
        ents.intern(name);
    }
    for (name, _) in &relation_text {
        rels.intern(name);
    }

    let mut in_train = vec![false; ents.len()];
    for t in &train {
        in_train[t.head] = true;
        in_train[t.tail] = true;
    }
    report.unseen_entities = valid
        .iter()
        .chain(&test)
        .flat_map(|t| [t.head, t.tail])
        .filter(|&e| !in_train[e])
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    debug_assert!(report
        .unseen_entities
        .iter()
        .all(|&e| e >= train_ents || !in_train[e]));
    report.unseen_relations = (train_rels..rels.len()).collect();
    if !report.unseen_entities.is_empty() {
        log::warn!(
            "{} entities of valid/test never occur in train",
            report.unseen_entities.len()
        );
    }

    let mut text = TextStore {
        entity_text: vec![String::new(); ents.len()],
        relation_text: vec![String::new(); rels.len()],
        max_len: TextStore::DEFAULT_MAX_LEN,
    };
    for (name, s) in entity_text {
        text.entity_text[ents.get(&name).unwrap()] = s;
    }
    for (name, s) in relation_text {
        text.relation_text[rels.get(&name).unwrap()] = s;
    }
    report.empty_entity_text = text.empty_entity_entries();
    report.empty_relation_text = text.empty_relation_entries();

    let split = TripleSplit::new(train, valid, test)?;
    let graph = KnowledgeGraph::new(ents, rels, &split.train, text)?;
    Ok((graph, split, report))
}

/// Writes triples as TSV using the graph's raw names. Only base relations
/// can be written.
pub fn write_triples(path: &Path, graph: &KnowledgeGraph, triples: &[Triple]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for t in triples {
        if t.relation >= graph.num_base_relations() {
            continue;
        }
        writeln!(
            f,
            "{}\t{}\t{}",
            graph.entity_name(t.head),
            graph.relations().name(t.relation),
            graph.entity_name(t.tail)
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Writes `entity_text.tsv` and `relation_text.tsv` (base relations only).
pub fn write_text(dir: &Path, graph: &KnowledgeGraph) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join("entity_text.tsv"))?);
    for (i, name) in graph.entities().names().iter().enumerate() {
        writeln!(f, "{name}\t{}", graph.text().entity_text[i])?;
    }
    f.flush()?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join("relation_text.tsv"))?);
    for (i, name) in graph.relations().names().iter().enumerate() {
        writeln!(f, "{name}\t{}", graph.text().relation_text[i])?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_small_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write(d, "train.tsv", "a\tr0\tb\nb\tr1\tc\nc\tr0\td\na\tr0\tb\n");
        write(d, "valid.tsv", "a\tr1\td\n");
        write(d, "test.tsv", "x\tr0\ta\n");
        write(d, "entity_text.tsv", "a\talpha\nb\tbeta\nz\tzeta\n");
        write(d, "relation_text.tsv", "r0\tlinks to\n");
        let (g, split, report) = load_dataset(&DatasetPaths::in_dir(d)).unwrap();
        assert_eq!(split.train.len(), 3);
        assert_eq!(report.duplicates_removed, [1, 0, 0]);
        // a b c d x z
        assert_eq!(g.num_entities(), 6);
        assert_eq!(g.num_relations(), 2);
        assert_eq!(report.unseen_entities, vec![g.entities().get("x").unwrap()]);
        assert_eq!(g.text().entity_text[g.entities().get("z").unwrap()], "zeta");
        assert_eq!(report.empty_entity_text, 3);
        assert_eq!(report.empty_relation_text, 1);
        assert_eq!(g.triples().len(), 3);
    }

    #[test]
    fn three_lines_four_entities() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write(d, "train.tsv", "a\tr0\tb\nc\tr1\td\na\tr1\td\n");
        write(d, "valid.tsv", "");
        write(d, "test.tsv", "");
        let (g, split, _) = load_dataset(&DatasetPaths::in_dir(d)).unwrap();
        assert_eq!(
            (g.num_entities(), g.num_relations(), split.train.len()),
            (4, 2, 3)
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.tsv", "a\tr\tb\n\nbroken line\n");
        match read_triples(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn write_then_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write(d, "train.tsv", "a\tr0\tb\nb\tr1\tc\n");
        write(d, "valid.tsv", "a\tr1\tc\n");
        write(d, "test.tsv", "c\tr0\ta\n");
        let (g, split, _) = load_dataset(&DatasetPaths::in_dir(d)).unwrap();
        let out = tempfile::tempdir().unwrap();
        write_triples(&out.path().join("train.tsv"), &g, &split.train).unwrap();
        write_triples(&out.path().join("valid.tsv"), &g, &split.valid).unwrap();
        write_triples(&out.path().join("test.tsv"), &g, &split.test).unwrap();
        write_text(out.path(), &g).unwrap();
        let (g2, split2, _) = load_dataset(&DatasetPaths::in_dir(out.path())).unwrap();
        assert_eq!(split, split2);
        assert_eq!(g.entities(), g2.entities());
    }
}
