"""The pinned disagreement scenario.

One question, three agents split two-to-one, a two-tool recruitment
(structured grounder plus model OCR), both scoring phases, a discussion
round where the dissenter flips, and an aggregator verdict.  Every endpoint
is scripted, so the resulting transcript is a pure function of this module;
its bytes are pinned in ``data/golden_disagreement.jsonl``.
"""

from pathlib import Path

from helpers import build_env, grounder_payload, plan_json, reply, scorer_json, standard_config
from tooldebate.debate import run_pipeline
from tooldebate.gateway import ImageAttachment

GOLDEN_PATH = Path(__file__).parent / "data" / "golden_disagreement.jsonl"

GOLDEN_QUESTION = "What animal is crossing the street?"
GOLDEN_QUESTION_ID = "golden-1"
GOLDEN_SEED = 13
GOLDEN_IMAGE_BYTES = b"golden-pixels"


def golden_scripts() -> dict[str, list[str]]:
    return {
        "a1": [
            reply("cat", "Pointed ears and whiskers are visible.", 0.8),
            reply("cat", "The grounder and the sign both point to a cat.", 0.9),
        ],
        "a2": [
            reply("dog", "The blurry shape reads as a dog.", 0.6),
            reply("cat", "The evidence outweighs my first impression.", 0.8),
        ],
        "a3": [
            reply("cat", "Tail shape suggests a cat.", 0.7),
            reply("cat", "The evidence matches my initial read.", 0.85),
        ],
        "recruiter": [
            plan_json(
                {
                    "grounder": {
                        "disagreement": "Whether the animal is a cat or a dog.",
                        "justification": "Localize both candidates to see which is present.",
                        "arguments": ["cat", "dog"],
                    },
                    "ocr": {
                        "disagreement": "Whether the animal is a cat or a dog.",
                        "justification": "A street sign may name the animal.",
                        "arguments": [],
                    },
                }
            )
        ],
        "tool-grounder": [grounder_payload(("cat", 0.92, (0.55, 0.1, 0.9, 0.5)))],
        "tool-ocr": ["The sign reads 'CAT CROSSING'."],
        "scorer": [
            scorer_json(1, "The grounder found the cat this agent describes."),
            scorer_json(1, "The sign text supports a cat."),
            scorer_json(0, "No dog was detected anywhere."),
            scorer_json(0, "The sign contradicts a dog reading."),
            scorer_json(1, "The detection matches this answer."),
            scorer_json(1, "The sign agrees with this answer."),
        ]
        + [scorer_json(1, "All evidence supports a cat.")] * 6,
        "aggregator": [
            reply("cat", "Both experts and all three agents support a cat.", 0.95)
        ],
    }


def golden_config():
    return standard_config(run_seed=GOLDEN_SEED)


def run_golden():
    config = golden_config()
    gateway, registry, prompts = build_env(config)
    for endpoint_id, script in golden_scripts().items():
        gateway.register_mock_script(endpoint_id, script)
    image = ImageAttachment(data=GOLDEN_IMAGE_BYTES, media_type="image/png")
    return run_pipeline(
        GOLDEN_QUESTION,
        image,
        config,
        question_id=GOLDEN_QUESTION_ID,
        gateway=gateway,
        registry=registry,
        prompts=prompts,
    )
