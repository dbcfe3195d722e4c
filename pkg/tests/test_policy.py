from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bulkmail.classify import Advertisement, InterestGroup, ListMail, Personal
from bulkmail.errors import AccountTerminated, ConfigError
from bulkmail.policy import (
    AccountBook,
    Action,
    ClientAccount,
    ComplaintResult,
    Decision,
    FilterRule,
    RateLimitConfig,
    RecipientPolicy,
    SendResult,
    WhitelistEntry,
    WhitelistResult,
    admit_send,
    admit_sends,
    filter_decision,
    max_liability,
    parse_policy_lines,
    register_complaint,
    reset_counter,
    whitelist_check,
)

from liability_oracle import search

T0 = datetime(2005, 3, 1, tzinfo=timezone.utc)
DAY = timedelta(days=1)
CFG = RateLimitConfig()


def adv(*groups: str) -> Advertisement:
    return Advertisement(tuple(InterestGroup.parse(g) for g in groups))


def rule(action: str, prefix: str) -> FilterRule:
    return FilterRule(InterestGroup.parse(prefix), Action(action))


# -- filtering ----------------------------------------------------------------


def test_ancestor_rule_discards_child_group():
    assert filter_decision(adv("rec.sports.swimming"), [rule("discard", "rec.sports")]) is Decision.DISCARD


def test_personal_always_delivered():
    assert filter_decision(Personal(), [rule("discard", "rec")]) is Decision.DELIVER


def test_child_rule_does_not_match_parent_group():
    assert filter_decision(adv("rec.sports"), [rule("discard", "rec.sports.swimming")]) is Decision.DELIVER


def test_partial_segment_does_not_match():
    assert filter_decision(adv("rec.sports"), [rule("discard", "rec.sport")]) is Decision.DELIVER


def test_first_match_wins():
    rules = [rule("keep", "rec.sports.sailing"), rule("discard", "rec.sports")]
    assert filter_decision(adv("rec.sports.sailing"), rules) is Decision.DELIVER
    assert filter_decision(adv("rec.sports.golf"), rules) is Decision.DISCARD


def test_discard_only_when_every_group_discarded():
    rules = [rule("discard", "rec.sports")]
    assert filter_decision(adv("rec.sports.golf", "comp.lang"), rules) is Decision.DELIVER
    assert filter_decision(adv("rec.sports.golf", "rec.sports.polo"), rules) is Decision.DISCARD


_grp = st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=3).map(lambda s: ".".join(s))
_rules = st.lists(st.tuples(st.sampled_from(["keep", "discard"]), _grp), max_size=6)


@given(st.lists(_grp, min_size=1, max_size=3, unique=True), _rules, _rules)
def test_filter_monotone_in_appended_rules(groups, first, extra):
    cls = adv(*groups)
    base = [rule(a, p) for a, p in first]
    more = base + [rule(a, p) for a, p in extra]
    decided = all(any(r.prefix.covers(g) for r in base) for g in cls.groups)
    if decided:
        assert filter_decision(cls, more) == filter_decision(cls, base)


# -- whitelist ----------------------------------------------------------------


def test_whitelist_examples():
    entries = [WhitelistEntry("freefood.348290")]
    assert whitelist_check("freefood.348290", "any.example", entries) is WhitelistResult.ALLOWED
    assert whitelist_check("other.1", "any.example", entries) is WhitelistResult.DROP
    bound = [WhitelistEntry("freefood.348290", "lists.example")]
    assert whitelist_check("freefood.348290", "evil.example", bound) is WhitelistResult.DROP
    assert whitelist_check("freefood.348290", "LISTS.example", bound) is WhitelistResult.ALLOWED
    assert whitelist_check("freefood.348290", None, bound) is WhitelistResult.DROP


def test_unsubscribe_forces_drop():
    policy = RecipientPolicy()
    policy.subscribe("news")
    assert policy.decide(ListMail("news")) is WhitelistResult.ALLOWED
    assert policy.unsubscribe("news")
    assert policy.decide(ListMail("news")) is WhitelistResult.DROP
    assert not policy.unsubscribe("news")


def test_parse_policy_lines():
    policy = parse_policy_lines(
        ["# comment", "discard rec.sports", "keep rec.sports.sailing", "", "list freefood.348290 lists.example"]
    )
    assert [r.action for r in policy.rules] == [Action.DISCARD, Action.KEEP]
    assert policy.whitelist["freefood.348290"].reverse_path == "lists.example"


@pytest.mark.parametrize("bad", [["drop rec"], ["discard"], ["list a", "list a"], ["discard rec..x"]])
def test_parse_policy_errors(bad):
    with pytest.raises(ConfigError):
        parse_policy_lines(bad)


# -- sends and complaints -----------------------------------------------------


def test_send_limit():
    acct = ClientAccount("u")
    for i in range(99):
        assert admit_send(acct, T0 + timedelta(minutes=i), CFG) is SendResult.ADMITTED
    assert admit_send(acct, T0 + DAY, CFG) is SendResult.ADMITTED
    assert acct.sends_in_window(T0 + DAY) == 100
    assert admit_send(acct, T0 + DAY, CFG) is SendResult.RATE_LIMITED


def test_send_window_slides():
    acct = ClientAccount("u")
    cfg = RateLimitConfig(send_limit_per_week=2)
    assert admit_sends(acct, 2, T0, cfg) is SendResult.ADMITTED
    assert admit_send(acct, T0 + timedelta(days=7), cfg) is SendResult.RATE_LIMITED
    assert admit_send(acct, T0 + timedelta(days=7, seconds=1), cfg) is SendResult.ADMITTED


def test_admit_sends_is_all_or_nothing():
    acct = ClientAccount("u")
    cfg = RateLimitConfig(send_limit_per_week=3)
    assert admit_sends(acct, 2, T0, cfg) is SendResult.ADMITTED
    assert admit_sends(acct, 2, T0, cfg) is SendResult.RATE_LIMITED
    assert acct.sends_in_window(T0) == 2


def test_terminated_account_cannot_send():
    acct = ClientAccount("u", terminated=True)
    assert admit_send(acct, T0, CFG) is SendResult.ACCOUNT_TERMINATED


def test_tenth_complaint_terminates():
    acct = ClientAccount("u")
    results = [register_complaint(acct, T0 + i * DAY, CFG) for i in range(10)]
    assert results[:9] == [ComplaintResult.WARNED] * 9
    assert results[9] is ComplaintResult.TERMINATED
    assert acct.terminated


def test_complaints_spread_beyond_window_never_terminate():
    acct = ClientAccount("u")
    step = timedelta(days=120 / 9)  # 10 complaints over 120 days, at most 7 in any 90
    results = [register_complaint(acct, T0 + i * step, CFG) for i in range(10)]
    assert results == [ComplaintResult.WARNED] * 10
    assert acct.complaints_in_window(T0 + 9 * step, CFG) < 10


def test_reset_counter():
    acct = ClientAccount("u")
    for i in range(9):
        register_complaint(acct, T0, CFG)
    assert reset_counter(acct, CFG) == 100
    assert acct.complaints_in_window(T0, CFG) == 0
    assert reset_counter(ClientAccount("v"), CFG) == 100
    with pytest.raises(AccountTerminated):
        reset_counter(ClientAccount("w", terminated=True), CFG)


def test_account_book_reuses_accounts():
    book = AccountBook()
    assert book.get("a") is book.get("a")
    assert {a.user_id for a in book} == {"a"}


@given(st.lists(st.integers(0, 200), max_size=40))
def test_old_events_never_influence_sends(offsets_days):
    """Sends older than a week never count, whatever their history."""
    cfg = RateLimitConfig(send_limit_per_week=3)
    acct = ClientAccount("u")
    for day in sorted(offsets_days):
        admit_send(acct, T0 + day * DAY, cfg)
    now = T0 + 300 * DAY
    assert acct.sends_in_window(now) == 0
    assert admit_sends(acct, 3, now, cfg) is SendResult.ADMITTED


# -- liability ----------------------------------------------------------------


def test_max_liability_defaults():
    assert max_liability(CFG) == 2090
    assert max_liability(CFG) <= CFG.monthly_fee


def test_max_liability_zero_penalty():
    assert max_liability(RateLimitConfig(micro_penalty=0)) == 0


def test_max_liability_half_rate():
    assert max_liability(RateLimitConfig(send_limit_per_week=50)) == 1090


def test_half_rate_bound_is_reached_by_a_concrete_schedule():
    """Drive real accounts through the worst schedule for 50/week and total it up."""
    from bulkmail.hashlog import LogStore

    cfg = RateLimitConfig(send_limit_per_week=50)
    acct = ClientAccount("u")
    log = LogStore()
    step = timedelta(days=3.5)
    for tick, count in ((0, 9), (3, 50), (6, 50)):
        now = T0 + tick * step
        assert admit_sends(acct, count, now, cfg) is SendResult.ADMITTED
        for i in range(count):
            log.record(f"{tick}/{i}".encode().ljust(32, b"."), "u", now)
        if tick == 0:
            for i in range(count):
                log.check_and_mark(f"0/{i}".encode().ljust(32, b"."), now)
                assert register_complaint(acct, now, cfg) is ComplaintResult.WARNED
    now = T0 + 6 * step
    open_ = sum(
        1
        for tick, count in ((0, 9), (3, 50), (6, 50))
        for i in range(count)
        if (e := log.lookup(f"{tick}/{i}".encode().ljust(32, b"."), now)) and not e.complaint_filed
    )
    assert (acct.complaints_in_window(now, cfg) + open_) * cfg.micro_penalty == max_liability(cfg)


@pytest.mark.parametrize("limit_per_week,complaint_limit", [(1, 1), (1, 2), (2, 1), (2, 2), (2, 3), (3, 2)])
def test_brute_force_oracle_matches_formula(limit_per_week, complaint_limit):
    cfg = RateLimitConfig(send_limit_per_week=limit_per_week, complaint_limit=complaint_limit)
    assert search(cfg).max_exposure == max_liability(cfg)


def test_brute_force_never_exceeds_formula_when_bound_is_out_of_reach():
    # three pre-termination complaints need more sends than one a week allows
    # inside the horizon, so the search stays strictly below the bound
    cfg = RateLimitConfig(send_limit_per_week=1, complaint_limit=4)
    assert search(cfg).max_exposure <= max_liability(cfg)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"send_limit_per_week": 0},
        {"complaint_limit": 0},
        {"micro_penalty": -1},
        {"send_limit_per_week": 200},  # bound 4090 exceeds the 3000 monthly fee
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        RateLimitConfig(**kwargs)
