//! Grammar-based generator of annotated real-estate ads.
//!
//! Trees follow the usual containment hierarchy: a property holds floors,
//! fields and extra buildings; floors hold spaces; spaces hold subspaces.
//! Every annotation is recoverable from the surface text, so a model with
//! enough capacity can fit a generated corpus perfectly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdDocument, Entity, EntityMention, EntityType, LabeledDocument, PropertyTree};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Probability that a document describes two floors with a crossing
    /// "respectively" construction.
    pub nonprojective_rate: f64,
    /// Probability of each kind of repeated mention (property, child
    /// description, space remark).
    pub coreference_rate: f64,
    /// Probability of ambiguous material: "garden house" as an extra
    /// building and entity words used outside any entity.
    pub ambiguity: f64,
    pub max_floors: usize,
    pub max_spaces: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nonprojective_rate: 0.3,
            coreference_rate: 0.3,
            ambiguity: 0.0,
            max_floors: 3,
            max_spaces: 3,
        }
    }
}

impl SynthConfig {
    /// Short documents without repeated mentions or ambiguity.
    pub fn simple() -> Self {
        SynthConfig {
            nonprojective_rate: 0.2,
            coreference_rate: 0.2,
            ambiguity: 0.0,
            max_floors: 2,
            max_spaces: 2,
        }
    }

    pub fn ambiguous() -> Self {
        SynthConfig {
            nonprojective_rate: 0.3,
            coreference_rate: 0.5,
            ambiguity: 0.5,
            max_floors: 3,
            max_spaces: 3,
        }
    }
}

const PROPERTIES: &[&str] = &["house", "apartment", "villa", "bungalow", "cottage"];
const PROPERTY_ADJ: &[&str] = &["detached", "large", "charming", "spacious", "renovated"];
const PROPERTY_COREF: &[&str] = &["home", "residence", "property"];
const FLOORS: &[&str] = &["ground floor", "first floor", "second floor", "attic", "basement"];
const SPACES: &[&str] = &[
    "kitchen",
    "living room",
    "bedroom",
    "bathroom",
    "hall",
    "dining room",
    "study",
    "laundry room",
];
const SPACE_ADJ: &[&str] = &["modern", "bright", "spacious", "cosy", "open"];
const SUBSPACES: &[&str] = &["shower", "bath", "toilet", "sink", "wardrobe", "fireplace", "closet"];
const FIELDS: &[&str] = &["garden", "terrace", "driveway", "lawn", "orchard"];
const EXTRAS: &[&str] = &["garage", "shed", "carport", "barn"];
const EXTRA_CHILDREN: &[&str] = &["workbench", "storage room", "loft", "gate"];
const REMARKS: &[&str] = &["bright", "new", "renovated", "quiet", "sunny"];

struct Builder {
    tokens: Vec<String>,
    entities: Vec<Entity>,
}

impl Builder {
    fn words(&mut self, text: &str) {
        self.tokens.extend(text.split_whitespace().map(str::to_owned));
    }

    fn span(&mut self, text: &str) -> EntityMention {
        let start = self.tokens.len() + 1;
        self.words(text);
        EntityMention::new(start, self.tokens.len() + 1)
    }

    fn entity(&mut self, t: EntityType, parent: Option<usize>, text: &str) -> usize {
        let m = self.span(text);
        let id = self.entities.len();
        self.entities.push(Entity {
            id: format!("e{}", id + 1),
            entity_type: t,
            mentions: vec![m],
            parent: parent.map(|p| format!("e{}", p + 1)),
        });
        id
    }

    fn mention(&mut self, entity: usize, text: &str) {
        let m = self.span(text);
        self.entities[entity].mentions.push(m);
    }

    fn finish(self, id: String) -> LabeledDocument {
        LabeledDocument {
            doc: AdDocument::new(id, self.tokens).expect("generator emits tokens"),
            tree: PropertyTree::new(self.entities),
        }
    }
}

/// An item of a list: determiner, modifiers and the noun phrase used for
/// later mentions.
#[derive(Clone)]
struct Item {
    t: EntityType,
    det: &'static str,
    modifiers: String,
    noun: String,
    children: Vec<Item>,
}

impl Item {
    fn new(t: EntityType, noun: &str) -> Self {
        Item {
            t,
            det: "a",
            modifiers: String::new(),
            noun: noun.to_string(),
            children: Vec::new(),
        }
    }

    fn text(&self) -> String {
        if self.modifiers.is_empty() {
            self.noun.clone()
        } else {
            format!("{} {}", self.modifiers, self.noun)
        }
    }
}

fn article<'a>(det: &'a str, next: &str) -> &'a str {
    if det == "a" && next.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        det
    }
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty")
}

fn space_item<R: Rng>(rng: &mut R, used: &mut Vec<String>) -> Item {
    let candidates: Vec<&str> = SPACES
        .iter()
        .copied()
        .filter(|s| !used.iter().any(|u| u == s))
        .collect();
    let noun = *candidates.choose(rng).unwrap_or(&"room");
    let mut item = Item::new(EntityType::Space, noun);
    if noun == "bedroom" && rng.gen_bool(0.5) {
        let count = rng.gen_range(2..=4);
        item.det = "";
        item.noun = "bedrooms".into();
        item.modifiers = if rng.gen_bool(0.5) {
            format!("{count} {}", pick(rng, SPACE_ADJ))
        } else {
            count.to_string()
        };
    } else if rng.gen_bool(0.3) {
        item.modifiers = pick(rng, SPACE_ADJ).into();
    }
    if rng.gen_bool(0.35) {
        let mut subs: Vec<&str> = SUBSPACES.to_vec();
        subs.shuffle(rng);
        let k = rng.gen_range(1..=2);
        item.children = subs[..k]
            .iter()
            .map(|s| Item::new(EntityType::Subspace, s))
            .collect();
    }
    used.push(noun.to_string());
    item
}

/// Emits `a X , b Y and c Z`, subspaces in parentheses after their space.
fn emit_list(b: &mut Builder, parent: usize, items: &[Item]) -> Vec<usize> {
    let mut ids = Vec::new();
    for (k, item) in items.iter().enumerate() {
        if k > 0 {
            b.words(if k + 1 == items.len() { "and" } else { "," });
        }
        if !item.det.is_empty() {
            b.words(article(item.det, &item.text()));
        }
        let id = b.entity(item.t, Some(parent), &item.text());
        if !item.children.is_empty() {
            b.words("(");
            for (c, child) in item.children.iter().enumerate() {
                if c > 0 {
                    b.words("and");
                }
                b.entity(child.t, Some(id), &child.text());
            }
            b.words(")");
        }
        ids.push(id);
    }
    ids
}

pub fn generate_document<R: Rng>(id: impl Into<String>, config: &SynthConfig, rng: &mut R) -> LabeledDocument {
    let mut b = Builder {
        tokens: Vec::new(),
        entities: Vec::new(),
    };
    let respectively = config.max_floors >= 2 && rng.gen_bool(config.nonprojective_rate);
    let n_floors = if respectively {
        rng.gen_range(2..=config.max_floors)
    } else {
        rng.gen_range(1..=config.max_floors.max(1))
    };
    let mut floor_names: Vec<&str> = FLOORS.to_vec();
    floor_names.shuffle(rng);
    let mut used = Vec::new();
    let floors: Vec<Item> = floor_names[..n_floors]
        .iter()
        .map(|f| {
            let mut item = Item::new(EntityType::Floor, f);
            item.det = "the";
            let k = rng.gen_range(1..=config.max_spaces.max(1));
            item.children = (0..k).map(|_| space_item(rng, &mut used)).collect();
            item
        })
        .collect();

    // Top-level items listed in the opening sentence.
    let mut intro: Vec<Item> = Vec::new();
    if rng.gen_bool(0.6) {
        intro.push(Item::new(EntityType::Field, pick(rng, FIELDS)));
    }
    let garden_house = rng.gen_bool(config.ambiguity);
    let mut extra: Option<Item> = None;
    if garden_house || rng.gen_bool(0.5) {
        let noun = if garden_house { "garden house" } else { pick(rng, EXTRAS) };
        let mut item = Item::new(EntityType::ExtraBuilding, noun);
        if rng.gen_bool(0.5) {
            let mut kids: Vec<&str> = EXTRA_CHILDREN.to_vec();
            kids.shuffle(rng);
            let k = rng.gen_range(1..=2);
            item.children = kids[..k]
                .iter()
                .map(|c| Item::new(EntityType::Subspace, c))
                .collect();
        }
        extra = Some(item);
    }
    // A described extra building is either introduced in the opening
    // sentence and mentioned again later, or only in its own sentence.
    let extra_coref = extra
        .as_ref()
        .is_some_and(|e| !e.children.is_empty() && rng.gen_bool(config.coreference_rate));
    if let Some(e) = &extra {
        if e.children.is_empty() || extra_coref {
            let mut listed = e.clone();
            listed.children.clear();
            intro.push(listed);
        }
    }

    let property_noun = pick(rng, PROPERTIES);
    let property_text = if rng.gen_bool(0.5) {
        format!("{} {property_noun}", pick(rng, PROPERTY_ADJ))
    } else {
        property_noun.to_string()
    };
    b.words(pick(rng, &["This", "A", "The"]));
    let p = b.entity(EntityType::Property, None, &property_text);
    let mut extra_id = None;
    if intro.is_empty() {
        b.words("is for sale .");
    } else {
        b.words(pick(rng, &["has", "offers", "includes"]));
        let ids = emit_list(&mut b, p, &intro);
        if extra.is_some() && intro.last().map(|i| i.t) == Some(EntityType::ExtraBuilding) {
            extra_id = ids.last().copied();
        }
        b.words(".");
    }

    // Floors and their spaces.
    let mut floor_ids = Vec::new();
    let mut remaining: Vec<Vec<Item>> = Vec::new();
    if respectively {
        let (f1, f2) = (&floors[0], &floors[1]);
        let s1 = Item {
            children: Vec::new(),
            ..f1.children[0].clone()
        };
        let s2 = Item {
            children: Vec::new(),
            ..f2.children[0].clone()
        };
        b.words("The");
        let id1 = b.entity(EntityType::Floor, Some(p), &f1.text());
        b.words("and the");
        let id2 = b.entity(EntityType::Floor, Some(p), &f2.text());
        b.words("have");
        if !s1.det.is_empty() {
            b.words(article(s1.det, &s1.text()));
        }
        b.entity(s1.t, Some(id1), &s1.text());
        b.words("and");
        if !s2.det.is_empty() {
            b.words(article(s2.det, &s2.text()));
        }
        b.entity(s2.t, Some(id2), &s2.text());
        b.words("respectively .");
        floor_ids.push(id1);
        floor_ids.push(id2);
        remaining.push(f1.children[1..].to_vec());
        remaining.push(f2.children[1..].to_vec());
        for (k, f) in [f1, f2].iter().enumerate() {
            if !remaining[k].is_empty() {
                b.words("The");
                b.mention(floor_ids[k], &f.noun);
                b.words("also has");
                emit_list(&mut b, floor_ids[k], &remaining[k]);
                b.words(".");
            }
        }
    }
    for f in floors.iter().skip(floor_ids.len()) {
        if rng.gen_bool(0.5) {
            b.words("The");
            let id = b.entity(EntityType::Floor, Some(p), &f.text());
            b.words(pick(rng, &["has", "offers", "contains"]));
            emit_list(&mut b, id, &f.children);
        } else {
            b.words("On the");
            let id = b.entity(EntityType::Floor, Some(p), &f.text());
            b.words("you find");
            emit_list(&mut b, id, &f.children);
        }
        b.words(".");
    }

    if let Some(e) = &extra {
        if !e.children.is_empty() {
            if let (true, Some(id)) = (extra_coref, extra_id) {
                b.words("The");
                b.mention(id, &e.noun);
                b.words("is equipped with");
                emit_list(&mut b, id, &e.children);
            } else {
                b.words("There is also a");
                let id = b.entity(e.t, Some(p), &e.text());
                b.words("with");
                emit_list(&mut b, id, &e.children);
            }
            b.words(".");
        }
    }

    if rng.gen_bool(config.coreference_rate) {
        // Later mention of a space, e.g. "The kitchen is bright ."
        let spaces: Vec<usize> = b
            .entities
            .iter()
            .enumerate()
            .filter(|(_, e)| e.entity_type == EntityType::Space)
            .map(|(k, _)| k)
            .collect();
        if let Some(&s) = spaces.choose(rng) {
            let m = b.entities[s].mentions[0];
            let noun = b.tokens[m.end - 2].clone();
            let noun = if noun == "room" {
                b.tokens[m.end - 3..m.end - 1].join(" ")
            } else {
                noun
            };
            b.words("The");
            b.mention(s, &noun);
            b.words("is");
            b.words(pick(rng, REMARKS));
            b.words(".");
        }
    }

    if rng.gen_bool(config.ambiguity) {
        let present: Vec<String> = b.tokens.clone();
        let unused: Vec<&str> = FIELDS
            .iter()
            .chain(EXTRAS)
            .copied()
            .filter(|w| !present.iter().any(|t| t == w))
            .collect();
        if let Some(w) = unused.choose(rng) {
            b.words(&format!("The {w} is not included ."));
        }
    }

    if rng.gen_bool(config.coreference_rate) {
        b.words("The");
        b.mention(p, pick(rng, PROPERTY_COREF));
        b.words("also has");
        let present = b.tokens.clone();
        let fields: Vec<&str> = FIELDS
            .iter()
            .copied()
            .filter(|w| !present.iter().any(|t| t == w))
            .collect();
        let field = fields.choose(rng).copied().unwrap_or("patio");
        b.words(article("a", field));
        b.entity(EntityType::Field, Some(p), field);
        b.words(".");
    }

    b.finish(id.into())
}

pub fn generate_corpus(n: usize, config: &SynthConfig, seed: u64) -> Vec<LabeledDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| generate_document(format!("synth-{k}"), config, &mut rng))
        .collect()
}

/// The running example: an apartment with a garage, described in three
/// sentences with two repeated mentions.
pub fn example_ad() -> (AdDocument, PropertyTree) {
    let mut b = Builder {
        tokens: Vec::new(),
        entities: Vec::new(),
    };
    b.words("The");
    let property = b.entity(EntityType::Property, None, "property");
    b.words("includes a");
    let apartment = b.entity(EntityType::Property, Some(property), "large apartment");
    b.words("with a");
    let garage = b.entity(EntityType::ExtraBuilding, Some(property), "garage");
    b.words(". The");
    b.mention(apartment, "home");
    b.words("has a");
    b.entity(EntityType::Space, Some(apartment), "living room");
    b.words(",");
    b.entity(EntityType::Space, Some(apartment), "3 spacious bedrooms");
    b.words("and a");
    b.entity(EntityType::Space, Some(apartment), "bathroom");
    b.words(". The");
    b.mention(garage, "garage");
    b.words("is equipped with a");
    b.entity(EntityType::Subspace, Some(garage), "gate");
    b.words("and a");
    b.entity(EntityType::Subspace, Some(garage), "bike wall bracket");
    b.words(".");
    let d = b.finish("example-ad".into());
    (d.doc, d.tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_tree_to_heads, has_nonprojective_part_of};

    #[test]
    fn example_ad_text() {
        let (doc, tree) = example_ad();
        assert_eq!(doc.len(), 37);
        assert_eq!(tree.entities.len(), 8);
        assert_eq!(doc.text(1, 11), "The property includes a large apartment with a garage .");
        tree.validate(doc.len()).unwrap();
    }

    #[test]
    fn generated_documents_are_valid() {
        for config in [SynthConfig::default(), SynthConfig::simple(), SynthConfig::ambiguous()] {
            for d in generate_corpus(200, &config, 11) {
                d.tree.validate(d.doc.len()).unwrap();
                let a = encode_tree_to_heads(&d.doc, &d.tree).unwrap();
                a.validate_skip_rule().unwrap();
            }
        }
    }

    #[test]
    fn nonprojective_share() {
        let docs = generate_corpus(400, &SynthConfig::default(), 5);
        let share = docs
            .iter()
            .filter(|d| has_nonprojective_part_of(&encode_tree_to_heads(&d.doc, &d.tree).unwrap()))
            .count() as f64
            / docs.len() as f64;
        assert!((0.25..0.9).contains(&share), "share {share}");
    }

    #[test]
    fn generation_is_seeded() {
        let c = SynthConfig::default();
        assert_eq!(generate_corpus(20, &c, 9), generate_corpus(20, &c, 9));
        assert_ne!(generate_corpus(20, &c, 9), generate_corpus(20, &c, 10));
    }
}
