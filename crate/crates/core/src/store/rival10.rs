use serde::Deserialize;

use super::ConceptDictionary;

const RIVAL10_TOML: &str = include_str!("../../fixtures/rival10_dictionary.toml");

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DictionaryFile {
    concepts: Vec<String>,
    classes: Vec<ClassEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    name: String,
    relevant: Vec<String>,
}

/// Parses a dictionary file in the fixture layout (`concepts` list plus one
/// `[[classes]]` table per class).
pub fn parse_dictionary_toml(text: &str) -> crate::Result<ConceptDictionary> {
    let file: DictionaryFile =
        toml::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))?;
    let classes: Vec<(String, Vec<String>)> =
        file.classes.into_iter().map(|c| (c.name, c.relevant)).collect();
    ConceptDictionary::from_names(&file.concepts, &classes)
}

/// The RIVAL10 class/concept dictionary: 10 classes over 18 concepts.
pub fn rival10_dictionary() -> ConceptDictionary {
    parse_dictionary_toml(RIVAL10_TOML).expect("bundled RIVAL10 fixture is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shape() {
        let d = rival10_dictionary();
        assert_eq!(d.n_classes(), 10);
        assert_eq!(d.n_concepts(), 18);
        let truck = d.class_index("truck").unwrap();
        let names: Vec<&str> = d.relevant[truck].iter().map(|&i| d.concepts[i].as_str()).collect();
        for want in ["wheels", "text", "metallic", "rectangular", "long", "tall"] {
            assert!(names.contains(&want), "{want} missing");
        }
        assert_eq!(names.len(), 6);
        let frog = d.class_index("frog").unwrap();
        assert_eq!(d.relevant[frog], vec![d.concept_index("wet").unwrap()]);
    }
}
