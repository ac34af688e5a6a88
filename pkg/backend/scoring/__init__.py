# TMA Scoring Package
