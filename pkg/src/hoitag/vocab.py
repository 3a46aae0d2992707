"""Closed vocabularies shared by the data engine, the detector and the captioner."""

ENTITY_CLASSES = ("person", "knife", "gun", "car", "bag", "wall")
ACTIONS = ("hold", "carry", "stand_by", "attack", "shoot", "hijack")
THREAT_ACTIONS = ("attack", "shoot", "hijack")

# Words used by the caption template grammar, besides entity and action names.
GRAMMAR_WORDS = ("A", "The", "the", "threat", "normal", "scene", "shows", "and", ",", ".")

SPECIAL_TOKENS = ("[PAD]", "[BOS]", "[EOS]", "[HOI]", "[SEP]", "[UNK]")
PAD_ID, BOS_ID, EOS_ID, HOI_ID, SEP_ID, UNK_ID = range(len(SPECIAL_TOKENS))


def tag_string(h_class: str, action: str, o_class: str) -> str:
    """Canonical tag unit used by the tag metrics."""
    return f"{h_class}|{action}|{o_class}"
