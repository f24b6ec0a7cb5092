use std::fmt::Write as _;

use super::{check_name, fmt_f64, numbered_lines, parse_error, parse_f64};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Ordered class names; position is the class index everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassRegistry {
    names: Vec<String>,
}

impl ClassRegistry {
    pub fn new(names: Vec<String>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            check_name("class name", n)?;
            if names[..i].contains(n) {
                return Err(Error::Validation(format!("duplicate class '{n}'")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, k: usize) -> &str {
        &self.names[k]
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Registry(name.to_string()))
    }

    /// Maps `names` onto this registry's indices.
    pub fn indices_of(&self, names: &[String]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.index(n)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestClip {
    pub id: String,
    pub duration: f64,
    /// Path of the feature file, relative to the manifest.
    pub features: String,
    pub tags: Vec<bool>,
}

/// ```text
/// version: 1
/// classes:
/// - Car
/// - Speech
/// clips:
/// - clip01,10,features/clip01.csv,Car;Speech
/// - clip02,10,features/clip02.csv,
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub classes: ClassRegistry,
    pub clips: Vec<ManifestClip>,
}

impl Manifest {
    pub fn new(classes: ClassRegistry, clips: Vec<ManifestClip>) -> Result<Self> {
        let m = Self { classes, clips };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.clips.iter().enumerate() {
            check_name("clip id", &c.id)?;
            if self.clips[..i].iter().any(|d| d.id == c.id) {
                return Err(Error::Validation(format!("duplicate clip id '{}'", c.id)));
            }
            if !(c.duration > 0.0 && c.duration.is_finite()) {
                return Err(Error::Validation(format!(
                    "clip '{}' has invalid duration {}",
                    c.id, c.duration
                )));
            }
            if c.features.is_empty() || c.features.contains([',', '\n', '\r']) {
                return Err(Error::Validation(format!(
                    "clip '{}' has invalid feature path",
                    c.id
                )));
            }
            if c.tags.len() != self.classes.len() {
                return Err(Error::Validation(format!(
                    "clip '{}' has {} tags for {} classes",
                    c.id,
                    c.tags.len(),
                    self.classes.len()
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> Result<String> {
        self.validate()?;
        let mut out = format!("version: {MANIFEST_VERSION}\nclasses:\n");
        for n in self.classes.names() {
            let _ = writeln!(out, "- {n}");
        }
        out.push_str("clips:\n");
        for c in &self.clips {
            let tags: Vec<&str> = c
                .tags
                .iter()
                .enumerate()
                .filter(|(_, &t)| t)
                .map(|(k, _)| self.classes.name(k))
                .collect();
            let _ = writeln!(
                out,
                "- {},{},{},{}",
                c.id,
                fmt_f64(c.duration),
                c.features,
                tags.join(";")
            );
        }
        Ok(out)
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let lines = numbered_lines(text, path)?;
        let mut it = lines.into_iter().peekable();
        let expect = |got: Option<(usize, &str)>, want: &str| -> Result<usize> {
            match got {
                Some((n, l)) if l == want => Ok(n),
                Some((n, l)) => Err(parse_error(
                    path,
                    n,
                    format!("expected '{want}', got '{l}'"),
                )),
                None => Err(parse_error(path, 0, format!("missing '{want}'"))),
            }
        };
        expect(it.next(), &format!("version: {MANIFEST_VERSION}"))?;
        expect(it.next(), "classes:")?;
        let mut names = Vec::new();
        while let Some(&(n, l)) = it.peek() {
            if l == "clips:" {
                break;
            }
            let name = l
                .strip_prefix("- ")
                .ok_or_else(|| parse_error(path, n, format!("expected '- <class>', got '{l}'")))?;
            check_name("class name", name).map_err(|e| parse_error(path, n, e.to_string()))?;
            if names.iter().any(|x| x == name) {
                return Err(parse_error(path, n, format!("duplicate class '{name}'")));
            }
            names.push(name.to_string());
            it.next();
        }
        expect(it.next(), "clips:")?;
        let classes = ClassRegistry::new(names)?;
        let mut clips: Vec<ManifestClip> = Vec::new();
        for (n, l) in it {
            let body = l.strip_prefix("- ").ok_or_else(|| {
                parse_error(path, n, format!("expected '- <clip record>', got '{l}'"))
            })?;
            let fields: Vec<&str> = body.split(',').collect();
            if fields.len() != 4 {
                return Err(parse_error(
                    path,
                    n,
                    format!("clip record needs 4 fields, got {}", fields.len()),
                ));
            }
            let id = fields[0];
            check_name("clip id", id).map_err(|e| parse_error(path, n, e.to_string()))?;
            if clips.iter().any(|c| c.id == id) {
                return Err(parse_error(path, n, format!("duplicate clip id '{id}'")));
            }
            let duration = parse_f64(fields[1], path, n)?;
            if duration <= 0.0 {
                return Err(Error::Validation(format!(
                    "{path}:{n}: duration must be positive"
                )));
            }
            if fields[2].is_empty() {
                return Err(parse_error(path, n, "empty feature path"));
            }
            let mut tags = vec![false; classes.len()];
            if !fields[3].is_empty() {
                let mut last = None;
                for name in fields[3].split(';') {
                    let k = classes.index(name)?;
                    // tags are written in class order, once each
                    if last.is_some_and(|p| k <= p) {
                        return Err(parse_error(path, n, "tags out of class order"));
                    }
                    last = Some(k);
                    tags[k] = true;
                }
            }
            clips.push(ManifestClip {
                id: id.to_string(),
                duration,
                features: fields[2].to_string(),
                tags,
            });
        }
        Ok(Self { classes, clips })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        Manifest::new(
            ClassRegistry::new(vec!["Car".into(), "Speech".into()]).unwrap(),
            vec![
                ManifestClip {
                    id: "clip01".into(),
                    duration: 10.0,
                    features: "features/clip01.csv".into(),
                    tags: vec![true, true],
                },
                ManifestClip {
                    id: "clip02".into(),
                    duration: 9.5,
                    features: "features/clip02.csv".into(),
                    tags: vec![false, false],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let text = sample().render().unwrap();
        assert_eq!(
            text,
            "version: 1\nclasses:\n- Car\n- Speech\nclips:\n\
             - clip01,10,features/clip01.csv,Car;Speech\n\
             - clip02,9.5,features/clip02.csv,\n"
        );
        let back = Manifest::parse(&text, "m").unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.render().unwrap(), text);
    }

    #[test]
    fn unknown_tag_is_registry_error() {
        let text = "version: 1\nclasses:\n- Car\nclips:\n- a,1,f.csv,Bus\n";
        assert!(matches!(Manifest::parse(text, "m"), Err(Error::Registry(n)) if n == "Bus"));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let text = "version: 1\nclasses:\n- Car\nclips:\n- a,1,f.csv\n";
        match Manifest::parse(text, "m") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        assert!(Manifest::parse("version: 2\n", "m").is_err());
        assert!(Manifest::parse("version: 1\nclasses:\n- Car\n- Car\nclips:\n", "m").is_err());
    }

    #[test]
    fn class_order_is_stable_under_clip_shuffle() {
        let mut m = sample();
        m.clips.reverse();
        let back = Manifest::parse(&m.render().unwrap(), "m").unwrap();
        assert_eq!(back.classes.index("Speech").unwrap(), 1);
        assert_eq!(back.clips[0].id, "clip02");
    }
}
