//! Graph specs shipped with the crate. The ReActNet topologies are only
//! audited, never trained.

use crate::error::{Error, Result};
use crate::nfgraph::GraphSpec;

pub const TOY: &str = include_str!("../specs/toy.spec");
pub const TOY_RLEAKY: &str = include_str!("../specs/toy_rleaky.spec");
pub const TOY_DOWNSAMPLE: &str = include_str!("../specs/toy_downsample.spec");
pub const REACTNET18: &str = include_str!("../specs/reactnet18.spec");
pub const REACTNET34: &str = include_str!("../specs/reactnet34.spec");
pub const REACTNET_A: &str = include_str!("../specs/reactnet_a.spec");

/// (name, text) of every bundled spec.
pub const ALL: &[(&str, &str)] = &[
    ("toy", TOY),
    ("toy_rleaky", TOY_RLEAKY),
    ("toy_downsample", TOY_DOWNSAMPLE),
    ("reactnet18", REACTNET18),
    ("reactnet34", REACTNET34),
    ("reactnet_a", REACTNET_A),
];

/// Names of the small trainable specs.
pub const TOYS: &[&str] = &["toy", "toy_rleaky", "toy_downsample"];

pub fn text(name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".spec").unwrap_or(name);
    ALL.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn spec(name: &str) -> Result<GraphSpec> {
    let t = text(name).ok_or_else(|| {
        let names: Vec<&str> = ALL.iter().map(|(n, _)| *n).collect();
        Error::Config(format!("no bundled spec `{name}` (have: {})", names.join(", ")))
    })?;
    GraphSpec::parse(t)
}

/// Load `bundled:<name>` from the crate or anything else from disk.
pub fn resolve(path_or_name: &str) -> Result<GraphSpec> {
    match path_or_name.strip_prefix("bundled:") {
        Some(name) => spec(name),
        None => GraphSpec::load(path_or_name),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_spec_plans() {
        for (name, _) in ALL {
            let s = spec(name).unwrap();
            s.plan().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(GraphSpec::parse(&s.to_text()).unwrap(), s);
        }
    }

    #[test]
    fn lookup() {
        assert_eq!(resolve("bundled:toy.spec").unwrap(), spec("toy").unwrap());
        assert!(matches!(spec("nope"), Err(Error::Config(_))));
        assert_eq!(spec("reactnet18").unwrap().blocks().unwrap().len(), 16);
    }
}
