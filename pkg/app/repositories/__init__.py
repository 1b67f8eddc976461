# Repositories package 