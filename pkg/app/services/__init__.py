# Services module for the Marcus Wong-Zakai toolkit
