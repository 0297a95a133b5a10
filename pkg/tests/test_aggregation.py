"""Final answer selection: aggregator model path and seeded majority vote."""

from fractions import Fraction

import pytest

from helpers import make_gateway, mock_profile, reply
from tooldebate.aggregation import (
    METHOD_AGGREGATOR,
    METHOD_MAJORITY,
    aggregate,
    majority_vote,
    render_aggregator_prompt,
    tiebreak_rng,
)
from tooldebate.agreement import AgreementScores
from tooldebate.answering import AgentAnswer, GroupedSolutions, group_solutions
from tooldebate.prompts import PromptLibrary
from tooldebate.tools import ExpertOutput


def agent(agent_id, answer, confidence=0.8):
    return AgentAnswer(agent_id, answer, f"reasons for {answer}", confidence, reply(answer))


def grouped_two_one():
    return group_solutions(
        [agent("agent-1", "cat"), agent("agent-2", "dog"), agent("agent-3", "cat")],
        stage="final",
    )


def tied_grouping():
    return group_solutions([agent("agent-1", "cat"), agent("agent-2", "dog")], stage="final")


class TestTiebreakRng:
    def test_same_inputs_same_stream(self):
        a = tiebreak_rng(7, "q1")
        b = tiebreak_rng(7, "q1")
        assert [a.randrange(100) for _ in range(5)] == [b.randrange(100) for _ in range(5)]

    def test_question_id_changes_the_stream(self):
        a = [tiebreak_rng(7, "q1").randrange(1000) for _ in range(3)]
        b = [tiebreak_rng(7, "q2").randrange(1000) for _ in range(3)]
        assert a != b

    def test_seed_changes_the_stream(self):
        assert tiebreak_rng(1, "q").randrange(10**9) != tiebreak_rng(2, "q").randrange(10**9)


class TestMajorityVote:
    def test_clear_winner(self):
        final = majority_vote(grouped_two_one())
        assert final.answer == "cat"
        assert final.method == METHOD_MAJORITY
        assert final.confidence == pytest.approx(2 / 3)
        assert "2 of 3 agents" in final.reasoning

    def test_tie_breaks_with_the_documented_rule(self):
        grouped = tied_grouping()
        rng = tiebreak_rng(7, "q-tie")
        final = majority_vote(grouped, tiebreak_rng(7, "q-tie"))
        tied = list(grouped.groups)
        expected = tied[rng.randrange(len(tied))]
        assert final.answer == expected.canonical_answer

    def test_tie_is_stable_across_calls(self):
        answers = {
            majority_vote(tied_grouping(), tiebreak_rng(3, "q")).answer for _ in range(10)
        }
        assert len(answers) == 1

    def test_both_tie_outcomes_reachable(self):
        picks = {
            majority_vote(tied_grouping(), tiebreak_rng(3, f"q{i}")).answer
            for i in range(32)
        }
        assert picks == {"cat", "dog"}

    def test_zero_groups_raises(self):
        with pytest.raises(ValueError, match="zero groups"):
            majority_vote(GroupedSolutions(groups=(), stage="final"))

    def test_single_agent(self):
        final = majority_vote(group_solutions([agent("agent-1", "owl")], stage="final"))
        assert final.answer == "owl"
        assert final.confidence == 1.0
        assert "1 of 1 agent" in final.reasoning


def aggregator_setup(script):
    gateway = make_gateway(mock_profile("aggregator", role="aggregator"))
    gateway.register_mock_script("aggregator", script)
    return gateway.profile("aggregator"), gateway


def run_aggregate(script, grouped=None, **kwargs):
    profile, gateway = aggregator_setup(script)
    warnings = []
    final = aggregate(
        grouped if grouped is not None else grouped_two_one(),
        kwargs.pop("expert_outputs", []),
        kwargs.pop("scores", None),
        profile,
        "What animal is this?",
        gateway=gateway,
        prompts=PromptLibrary(),
        warnings=warnings,
        **kwargs,
    )
    return final, warnings, gateway


class TestAggregate:
    def test_scripted_pick(self):
        final, warnings, gateway = run_aggregate([reply("cat", "evidence says cat", 0.9)])
        assert final.answer == "cat"
        assert final.confidence == 0.9
        assert final.method == METHOD_AGGREGATOR
        assert not final.off_menu
        assert warnings == []
        assert gateway.attempts("aggregator") == 1

    def test_off_menu_answer_is_flagged(self):
        final, _, _ = run_aggregate([reply("ferret", "a surprise", 0.4)])
        assert final.answer == "ferret"
        assert final.off_menu

    def test_reprompt_then_parse(self):
        final, warnings, gateway = run_aggregate(["unusable", reply("dog")])
        assert final.answer == "dog"
        assert gateway.attempts("aggregator") == 2
        assert warnings == []

    def test_double_failure_falls_back_to_majority(self):
        final, warnings, gateway = run_aggregate(["junk", "junk again"])
        assert final.method == METHOD_MAJORITY
        assert final.answer == "cat"
        assert final.confidence == pytest.approx(2 / 3)
        assert warnings == ["aggregator parse failure; fell back to majority vote"]

    def test_menu_matching_uses_normalization(self):
        final, _, _ = run_aggregate([reply("Cat.", "case and punctuation differ", 0.8)])
        assert not final.off_menu

    def test_image_rides_on_the_request(self):
        from tooldebate.gateway import ImageAttachment

        profile, gateway = aggregator_setup([reply("cat")])
        requests = []
        aggregate(
            grouped_two_one(),
            [],
            None,
            profile,
            "Q?",
            gateway=gateway,
            prompts=PromptLibrary(),
            image=ImageAttachment(data=b"pix"),
            recorder=lambda a, req, res: requests.append(req),
        )
        assert requests[0].messages[0].images


class TestAggregatorPrompt:
    def test_contains_question_groups_and_evidence(self):
        prompt = render_aggregator_prompt(
            grouped_two_one(),
            [ExpertOutput("ocr", "d", "Sign says CAT.", True)],
            None,
            "What animal is this?",
            PromptLibrary(),
        )
        assert "The question is: What animal is this?" in prompt
        assert "Answer: cat (2 agents)" in prompt
        assert "Expert (ocr): Sign says CAT." in prompt

    def test_scores_render_as_expert_agreement(self):
        answers = [agent("agent-1", "cat"), agent("agent-2", "dog"), agent("agent-3", "cat")]
        scores = AgreementScores(
            matrix=((1, 1), (0, 0), (1, 0)),
            per_agent_mean=(Fraction(1), Fraction(0), Fraction(1, 2)),
            denominator=2,
        )
        prompt = render_aggregator_prompt(
            group_solutions(answers, stage="final"),
            [],
            scores,
            "Q?",
            PromptLibrary(),
            final_answers=answers,
        )
        assert "Expert-agreement: 1.0, 0.5" in prompt
        assert "Expert-agreement: 0.0" in prompt

    def test_initial_answers_block_is_opt_in(self):
        initial = group_solutions([agent("agent-1", "dog"), agent("agent-2", "dog")])
        without = render_aggregator_prompt(
            grouped_two_one(), [], None, "Q?", PromptLibrary()
        )
        with_block = render_aggregator_prompt(
            grouped_two_one(), [], None, "Q?", PromptLibrary(), initial_grouped=initial
        )
        assert "Initial answers (before discussion):" not in without
        assert "Initial answers (before discussion):" in with_block
        assert "Answer: dog (2 agents)" in with_block
