"""
Spatio-temporal detection of small flying objects in video
"""
