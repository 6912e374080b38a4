"""Shared state between the acceptance tests and the summary hook in conftest."""

OUTCOMES = {}  # criterion number -> pytest outcome
DETAILS = {}  # criterion number -> measured values


def note(number, text):
    DETAILS[number] = text
